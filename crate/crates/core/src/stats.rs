//! Calibration statistics: the activation second moment, the importance
//! matrix derived from it, the 3-sigma saliency mask and the losses built on
//! top of them.

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::abmp::GroupPartition;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, DenseMatrix, Tensor};
use crate::toy::ActivationRecord;

/// Unnormalized `sum x x^T` over every accumulated activation column.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoment {
    dim: usize,
    s: Vec<f64>,
    count: u64,
}

impl SecondMoment {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            s: vec![0.0; dim * dim],
            count: 0,
        }
    }

    pub fn from_parts(dim: usize, s: Vec<f64>, count: u64) -> Result<Self> {
        if s.len() != dim * dim {
            return Err(Error::shape(format!(
                "second moment of dim {dim} needs {} values, got {}",
                dim * dim,
                s.len()
            )));
        }
        Ok(Self { dim, s, count })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Row-major `dim x dim` entries.
    pub fn matrix(&self) -> &[f64] {
        &self.s
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.dim + j]
    }

    /// Adds `A A^T` for an `m x tokens` operand.
    pub fn accumulate(&mut self, inputs: &DenseMatrix) -> Result<()> {
        let m = self.dim;
        if inputs.rows() != m {
            return Err(Error::shape(format!(
                "activation has {} rows, second moment has dim {m}",
                inputs.rows()
            )));
        }
        let cols = inputs.transpose();
        for t in 0..cols.rows() {
            let x = cols.row(t);
            for i in 0..m {
                let xi = x[i] as f64;
                if xi == 0.0 {
                    continue;
                }
                let row = &mut self.s[i * m..(i + 1) * m];
                for j in i..m {
                    row[j] += xi * x[j] as f64;
                }
            }
        }
        self.mirror_upper();
        self.count += inputs.cols() as u64;
        Ok(())
    }

    pub fn accumulate_record(&mut self, record: &ActivationRecord) -> Result<()> {
        self.accumulate(&record.inputs)
            .map_err(|e| e.in_layer(&record.layer))
    }

    fn mirror_upper(&mut self) {
        let m = self.dim;
        for i in 0..m {
            for j in 0..i {
                self.s[i * m + j] = self.s[j * m + i];
            }
        }
    }

    pub fn merge(&self, other: &SecondMoment) -> Result<SecondMoment> {
        let mut out = self.clone();
        out.merge_in_place(other)?;
        Ok(out)
    }

    pub fn merge_in_place(&mut self, other: &SecondMoment) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::shape(format!(
                "cannot merge second moments of dim {} and {}",
                self.dim, other.dim
            )));
        }
        for (a, b) in self.s.iter_mut().zip(&other.s) {
            *a += b;
        }
        self.count += other.count;
        Ok(())
    }

    /// Diagonal of `(S + gamma I)^-1` with `gamma = damp_rel * mean(diag S)`.
    pub fn damped_inverse_diag(&self, damp_rel: f64) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::invalid("second moment has no samples"));
        }
        if !(damp_rel >= 0.0) {
            return Err(Error::invalid(format!("damping {damp_rel} must be non-negative")));
        }
        let m = self.dim;
        let mean_diag = (0..m).map(|i| self.get(i, i)).sum::<f64>() / m as f64;
        let gamma = damp_rel * mean_diag;
        let mut a = self.s.clone();
        for i in 0..m {
            a[i * m + i] += gamma;
        }
        let l = cholesky(&mut a, m).ok_or(Error::Singular { gamma })?;
        // diag(A^-1)_j = sum_k (L^-1)_{kj}^2
        let linv = lower_inverse(l, m);
        let mut d = vec![0.0; m];
        for k in 0..m {
            for j in 0..=k {
                d[j] += linv[k * m + j] * linv[k * m + j];
            }
        }
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_tensor(path, &Tensor::f64_matrix(self.dim, self.dim, self.s.clone())?)?;
        let side = count_path(path);
        fs::write(&side, format!("{}\n", self.count)).map_err(|e| Error::io(side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (rows, cols, s) = read_tensor(path)?.into_f64_matrix()?;
        if rows != cols {
            return Err(Error::shape(format!("second moment is {rows}x{cols}")));
        }
        let side = count_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let count = text
            .trim()
            .parse()
            .map_err(|_| Error::Corrupt(format!("bad sample count in {}", side.display())))?;
        SecondMoment::from_parts(rows, s, count)
    }
}

/// Sidecar file holding the sample count next to a stored second moment.
pub fn count_path(path: &Path) -> PathBuf {
    path.with_extension("count")
}

/// In-place lower Cholesky factor; `None` if not positive definite.
fn cholesky(a: &mut [f64], m: usize) -> Option<&[f64]> {
    for j in 0..m {
        let mut diag = a[j * m + j];
        for k in 0..j {
            diag -= a[j * m + k] * a[j * m + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return None;
        }
        let ljj = diag.sqrt();
        a[j * m + j] = ljj;
        for i in j + 1..m {
            let mut v = a[i * m + j];
            for k in 0..j {
                v -= a[i * m + k] * a[j * m + k];
            }
            a[i * m + j] = v / ljj;
        }
    }
    for i in 0..m {
        for j in i + 1..m {
            a[i * m + j] = 0.0;
        }
    }
    Some(a)
}

fn lower_inverse(l: &[f64], m: usize) -> Vec<f64> {
    let mut inv = vec![0.0; m * m];
    for j in 0..m {
        inv[j * m + j] = 1.0 / l[j * m + j];
        for i in j + 1..m {
            let mut s = 0.0;
            for k in j..i {
                s += l[i * m + k] * inv[k * m + j];
            }
            inv[i * m + j] = -s / l[i * m + i];
        }
    }
    inv
}

/// `Z_ij = (W_ij / d_j)^2`.
pub fn importance_matrix(w: &DenseMatrix, d: &[f64]) -> Result<DenseMatrix> {
    if w.cols() != d.len() {
        return Err(Error::shape(format!(
            "weight has {} columns, inverse diagonal has {}",
            w.cols(),
            d.len()
        )));
    }
    if let Some(j) = d.iter().position(|&v| !(v > 0.0)) {
        return Err(Error::invalid(format!("inverse diagonal entry {j} is not positive")));
    }
    let mut z = DenseMatrix::zeros(w.rows(), w.cols());
    for i in 0..w.rows() {
        for (j, (&wv, zv)) in w.row(i).iter().zip(z.row_mut(i)).enumerate() {
            let q = wv as f64 / d[j];
            *zv = (q * q) as f32;
        }
    }
    Ok(z)
}

/// Elementwise weights `Lambda = 1 + (lambda - 1) * Pi` for a binary outlier mask `Pi`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMask {
    rows: usize,
    cols: usize,
    lambda: f64,
    mask: Vec<bool>,
}

impl SaliencyMask {
    /// All weights equal to one.
    pub fn uniform(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            lambda: 1.0,
            mask: vec![false; rows * cols],
        }
    }

    pub fn from_mask(rows: usize, cols: usize, lambda: f64, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != rows * cols {
            return Err(Error::shape("mask length does not match shape"));
        }
        Ok(Self {
            rows,
            cols,
            lambda,
            mask,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn weight_at(&self, idx: usize) -> f64 {
        if self.mask[idx] {
            self.lambda
        } else {
            1.0
        }
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weight_at(i * self.cols + j)
    }

    pub fn is_uniform(&self) -> bool {
        self.lambda == 1.0 || !self.mask.iter().any(|&b| b)
    }

    pub fn outlier_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|&&b| b).count() as f64 / self.mask.len() as f64
    }

    /// Sub-mask over a column range.
    pub fn columns(&self, range: Range<usize>) -> Result<SaliencyMask> {
        if range.end > self.cols || range.start > range.end {
            return Err(Error::shape(format!("column range {range:?} outside 0..{}", self.cols)));
        }
        let mut mask = Vec::with_capacity(self.rows * range.len());
        for i in 0..self.rows {
            mask.extend_from_slice(&self.mask[i * self.cols + range.start..i * self.cols + range.end]);
        }
        Ok(SaliencyMask {
            rows: self.rows,
            cols: range.len(),
            lambda: self.lambda,
            mask,
        })
    }
}

/// Flags entries farther than three global standard deviations from the
/// global mean of `Z`.
pub fn build_importance_mask(z: &DenseMatrix, lambda: f64) -> Result<SaliencyMask> {
    if z.is_empty() {
        return Err(Error::invalid("importance matrix is empty"));
    }
    if !(lambda > 1.0) {
        return Err(Error::invalid(format!("lambda {lambda} must exceed 1")));
    }
    let n = z.data().len() as f64;
    let mean = z.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = z
        .data()
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let sigma = var.sqrt();
    let mask = if sigma > 0.0 {
        z.data()
            .iter()
            .map(|&v| (v as f64 - mean).abs() > 3.0 * sigma)
            .collect()
    } else {
        vec![false; z.data().len()]
    };
    SaliencyMask::from_mask(z.rows(), z.cols(), lambda, mask)
}

/// `|| Lambda . (W - What) ||_F^2`.
pub fn proxy_loss(w: &DenseMatrix, w_hat: &DenseMatrix, mask: &SaliencyMask) -> Result<f64> {
    w.check_same_shape(w_hat)?;
    if mask.shape() != w.shape() {
        return Err(Error::shape("saliency mask shape differs from weight"));
    }
    Ok(w
        .data()
        .iter()
        .zip(w_hat.data())
        .enumerate()
        .map(|(idx, (&a, &b))| {
            let e = mask.weight_at(idx) * (a as f64 - b as f64);
            e * e
        })
        .sum())
}

/// `Tr((W - What) S (W - What)^T)`.
pub fn true_data_loss(w: &DenseMatrix, w_hat: &DenseMatrix, sm: &SecondMoment) -> Result<f64> {
    w.check_same_shape(w_hat)?;
    let m = sm.dim();
    if w.cols() != m {
        return Err(Error::shape(format!(
            "weight has {} columns, second moment has dim {m}",
            w.cols()
        )));
    }
    let mut total = 0.0;
    let mut delta = vec![0.0f64; m];
    for i in 0..w.rows() {
        for ((d, &a), &b) in delta.iter_mut().zip(w.row(i)).zip(w_hat.row(i)) {
            *d = a as f64 - b as f64;
        }
        for j in 0..m {
            if delta[j] == 0.0 {
                continue;
            }
            let srow = &sm.matrix()[j * m..(j + 1) * m];
            let dot: f64 = srow.iter().zip(&delta).map(|(s, d)| s * d).sum();
            total += delta[j] * dot;
        }
    }
    Ok(total)
}

/// Per-group sums of `Z`.
pub fn block_scores(z: &DenseMatrix, partition: &GroupPartition) -> Result<Vec<f64>> {
    if partition.shape() != z.shape() {
        return Err(Error::shape(format!(
            "partition covers {:?}, importance matrix is {:?}",
            partition.shape(),
            z.shape()
        )));
    }
    partition.validate()?;
    Ok(partition
        .groups()
        .iter()
        .map(|g| {
            (0..z.rows())
                .map(|i| z.row(i)[g.clone()].iter().map(|&v| v as f64).sum::<f64>())
                .sum()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abmp::partition;
    use crate::tensor::Rng;

    fn mat(rows: &[&[f32]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn accumulate_single_and_pair() {
        let mut sm = SecondMoment::new(2);
        sm.accumulate(&mat(&[&[1.0], &[2.0]])).unwrap();
        assert_eq!(sm.matrix(), &[1.0, 2.0, 2.0, 4.0]);
        assert_eq!(sm.count(), 1);

        let mut sm = SecondMoment::new(2);
        sm.accumulate(&mat(&[&[1.0, 0.0], &[0.0, 1.0]])).unwrap();
        assert_eq!(sm.matrix(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(sm.count(), 2);

        assert!(sm.accumulate(&mat(&[&[1.0]])).is_err());
    }

    #[test]
    fn merge_identities() {
        let mut rng = Rng::new(5, 0);
        let mut a = SecondMoment::new(3);
        a.accumulate(&DenseMatrix::gaussian(3, 7, 1.0, &mut rng)).unwrap();
        let mut b = SecondMoment::new(3);
        b.accumulate(&DenseMatrix::gaussian(3, 4, 1.0, &mut rng)).unwrap();
        assert_eq!(a.merge(&SecondMoment::new(3)).unwrap(), a);
        assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
        assert_eq!(a.merge(&b).unwrap().count(), 11);
        assert!(a.merge(&SecondMoment::new(2)).is_err());
    }

    #[test]
    fn inverse_diag_small_cases() {
        let eye = SecondMoment::from_parts(3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.], 1).unwrap();
        let d = eye.damped_inverse_diag(1.0).unwrap();
        assert!(d.iter().all(|&v| (v - 0.5).abs() < 1e-15));

        // mean diag = 1.5, damp_rel = 2/3 gives gamma = 1
        let s = SecondMoment::from_parts(2, vec![3., 0., 0., 0.], 1).unwrap();
        let d = s.damped_inverse_diag(2.0 / 3.0).unwrap();
        assert!((d[0] - 0.25).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12, "{d:?}");
    }

    #[test]
    fn inverse_diag_errors() {
        let s = SecondMoment::from_parts(2, vec![3., 0., 0., 0.], 1).unwrap();
        assert!(matches!(s.damped_inverse_diag(0.0), Err(Error::Singular { .. })));
        assert!(SecondMoment::new(2).damped_inverse_diag(0.01).is_err());
        assert!(s.damped_inverse_diag(-1.0).is_err());
    }

    #[test]
    fn importance_examples() {
        let w = mat(&[&[1.0, 2.0]]);
        let z = importance_matrix(&w, &[0.5, 1.0]).unwrap();
        assert_eq!(z.data(), &[4.0, 4.0]);
        let z1 = importance_matrix(&w, &[1.0, 1.0]).unwrap();
        assert_eq!(z1.data(), &[1.0, 4.0]);
        let z3 = importance_matrix(&w.scaled(3.0), &[1.0, 1.0]).unwrap();
        assert_eq!(z3.data(), &[9.0, 36.0]);
        assert!(importance_matrix(&w, &[0.0, 1.0]).is_err());
        assert!(importance_matrix(&w, &[1.0]).is_err());
    }

    #[test]
    fn mask_constant_and_single_outlier() {
        let flat = build_importance_mask(&DenseMatrix::filled(4, 4, 2.5), 2.0).unwrap();
        assert!(flat.mask().iter().all(|&b| !b));

        let mut data = vec![1.0f32; 100];
        data[37] = 1000.0;
        let z = DenseMatrix::new(10, 10, data).unwrap();
        let m = build_importance_mask(&z, 2.0).unwrap();
        assert_eq!(m.mask().iter().filter(|&&b| b).count(), 1);
        assert!(m.mask()[37]);
        assert_eq!(m.weight(3, 7), 2.0);
        assert_eq!(m.weight(0, 0), 1.0);
        assert!(build_importance_mask(&z, 1.0).is_err());
    }

    #[test]
    fn proxy_loss_examples() {
        let w = mat(&[&[1.0, -2.0], &[3.0, 4.0]]);
        let u = SaliencyMask::uniform(2, 2);
        assert_eq!(proxy_loss(&w, &w, &u).unwrap(), 0.0);
        let delta = mat(&[&[-0.142857, -0.142857], &[0.333333, -0.333333]]);
        let zero = DenseMatrix::zeros(2, 2);
        assert!((proxy_loss(&delta, &zero, &u).unwrap() - 0.263039).abs() < 1e-5);

        let flagged = SaliencyMask::from_mask(2, 2, 2.0, vec![false, false, true, false]).unwrap();
        let plain = proxy_loss(&delta, &zero, &u).unwrap();
        let weighted = proxy_loss(&delta, &zero, &flagged).unwrap();
        let entry = 0.333333f32 as f64;
        assert!((weighted - plain - 3.0 * entry * entry).abs() < 1e-9);
    }

    #[test]
    fn data_loss_identity_moment() {
        let mut rng = Rng::new(8, 0);
        let w = DenseMatrix::gaussian(3, 4, 1.0, &mut rng);
        let wh = DenseMatrix::gaussian(3, 4, 1.0, &mut rng);
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let s = SecondMoment::from_parts(4, eye, 1).unwrap();
        let plain: f64 = w
            .data()
            .iter()
            .zip(wh.data())
            .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
            .sum();
        assert!((true_data_loss(&w, &wh, &s).unwrap() - plain).abs() < 1e-12 * plain);
        assert_eq!(true_data_loss(&w, &w, &s).unwrap(), 0.0);
    }

    #[test]
    fn block_score_examples() {
        let z = DenseMatrix::filled(256, 256, 1.0);
        let p = partition(256, 256, 128).unwrap();
        assert_eq!(block_scores(&z, &p).unwrap(), vec![32768.0, 32768.0]);
        let whole = partition(256, 256, 256).unwrap();
        assert_eq!(block_scores(&z, &whole).unwrap(), vec![65536.0]);
        let bad = GroupPartition::from_ranges(256, 256, 128, vec![0..100, 128..256]);
        assert!(bad.is_err());
    }
}
