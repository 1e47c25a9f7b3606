//! Data-aware multi-binary quantizer.
//!
//! A weight block is approximated by `K` terms `(alpha_r alpha_c^T) . B_k`
//! with `B_k` in `{-1, +1}`. Orders are initialized greedily on the running
//! residual, then refined by alternating closed-form row and column
//! re-scaling under the saliency weights, followed by a joint per-entry
//! search over all sign patterns.
//!
//! Scales are stored as `f32`; every accumulation runs in `f64`.

use rayon::prelude::*;

use crate::abmp::{BitAllocation, GroupPartition};
use crate::error::{Error, Result};
use crate::stats::SaliencyMask;
use crate::tensor::DenseMatrix;

pub const MAX_ORDER: usize = 3;

/// Row-major matrix of `+1` / `-1` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
}

impl SignMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<i8>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("sign data length does not match shape"));
        }
        if data.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::invalid("sign entries must be +1 or -1"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, sign: i8) -> Self {
        Self {
            rows,
            cols,
            data: vec![if sign < 0 { -1 } else { 1 }; rows * cols],
        }
    }

    /// `sign(x)` with `sign(0) = +1`.
    pub fn sign_of(x: &DenseMatrix) -> Self {
        Self {
            rows: x.rows(),
            cols: x.cols(),
            data: x.data().iter().map(|&v| if v >= 0.0 { 1 } else { -1 }).collect(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> i8 {
        self.data[i * self.cols + j]
    }

    pub fn negated(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|s| -s).collect(),
        }
    }
}

/// One `(alpha_r alpha_c^T) . B` term.
#[derive(Debug, Clone, PartialEq)]
pub struct RCBinaryOrder {
    pub alpha_r: Vec<f32>,
    pub alpha_c: Vec<f32>,
    pub signs: SignMatrix,
}

impl RCBinaryOrder {
    pub fn shape(&self) -> (usize, usize) {
        (self.alpha_r.len(), self.alpha_c.len())
    }

    #[inline]
    fn value(&self, i: usize, j: usize) -> f64 {
        self.alpha_r[i] as f64 * self.alpha_c[j] as f64 * self.signs.get(i, j) as f64
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let (n, m) = self.shape();
        let mut out = DenseMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                out.set(i, j, self.value(i, j) as f32);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaqConfig {
    /// Number of binary terms `K`.
    pub order: usize,
    /// Maximum refinement sweeps.
    pub sweeps: usize,
    /// Stop once a sweep improves the proxy by less than this fraction.
    pub tol: f64,
    pub epsilon: f64,
    pub row_center: bool,
}

impl Default for DaqConfig {
    fn default() -> Self {
        Self {
            order: 2,
            sweeps: 10,
            tol: 1e-6,
            epsilon: 1e-8,
            row_center: true,
        }
    }
}

impl DaqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_ORDER).contains(&self.order) {
            return Err(Error::invalid(format!("order {} outside 1..=3", self.order)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::invalid("tolerance must be non-negative"));
        }
        Ok(())
    }
}

/// Quantized representation of one weight block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGroup {
    pub orders: Vec<RCBinaryOrder>,
    pub row_mean: Option<Vec<f32>>,
}

impl QuantizedGroup {
    pub fn order(&self) -> usize {
        self.orders.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.orders.first().map_or((0, 0), RCBinaryOrder::shape)
    }

    pub fn dequantize(&self) -> DenseMatrix {
        let (n, m) = self.shape();
        let mut out = DenseMatrix::zeros(n, m);
        for i in 0..n {
            let mu = self.row_mean.as_ref().map_or(0.0, |mu| mu[i] as f64);
            for j in 0..m {
                let v: f64 = self.orders.iter().map(|o| o.value(i, j)).sum();
                out.set(i, j, (mu + v) as f32);
            }
        }
        out
    }
}

/// Result of a fit together with the proxy loss after initialization
/// (`trace[0]`) and after each refinement sweep.
#[derive(Debug, Clone)]
pub struct DaqFit {
    pub group: QuantizedGroup,
    pub trace: Vec<f64>,
}

impl DaqFit {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace has the init entry")
    }
}

/// Single-scale baseline: `B = sign(W)`, `alpha_r` = row means of `|W|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassicBinary {
    pub row_mean: Option<Vec<f32>>,
    pub alpha_r: Vec<f32>,
    pub signs: SignMatrix,
}

impl ClassicBinary {
    pub fn reconstruct(&self) -> DenseMatrix {
        let (n, m) = (self.signs.rows(), self.signs.cols());
        let mut out = DenseMatrix::zeros(n, m);
        for i in 0..n {
            let mu = self.row_mean.as_ref().map_or(0.0, |mu| mu[i]);
            for j in 0..m {
                out.set(i, j, mu + self.alpha_r[i] * self.signs.get(i, j) as f32);
            }
        }
        out
    }
}

fn check_nonempty(x: &DenseMatrix) -> Result<()> {
    if x.is_empty() {
        return Err(Error::invalid("matrix is empty"));
    }
    Ok(())
}

pub fn row_means(w: &DenseMatrix) -> Vec<f32> {
    (0..w.rows())
        .map(|i| (w.row(i).iter().map(|&v| v as f64).sum::<f64>() / w.cols() as f64) as f32)
        .collect()
}

fn subtract_row_means(w: &DenseMatrix, mu: &[f32]) -> DenseMatrix {
    let mut out = w.clone();
    for (i, &m) in mu.iter().enumerate() {
        for v in out.row_mut(i) {
            *v -= m;
        }
    }
    out
}

fn abs_row_means(x: &DenseMatrix) -> Vec<f32> {
    (0..x.rows())
        .map(|i| (x.row(i).iter().map(|&v| (v as f64).abs()).sum::<f64>() / x.cols() as f64) as f32)
        .collect()
}

pub fn classic_binarize(w: &DenseMatrix, row_center: bool) -> Result<ClassicBinary> {
    check_nonempty(w)?;
    let row_mean = row_center.then(|| row_means(w));
    let centered = match &row_mean {
        Some(mu) => subtract_row_means(w, mu),
        None => w.clone(),
    };
    Ok(ClassicBinary {
        alpha_r: abs_row_means(&centered),
        signs: SignMatrix::sign_of(&centered),
        row_mean,
    })
}

/// Closed-form initialization of one term from the magnitudes of `x`.
pub fn binary_rc_init(x: &DenseMatrix) -> Result<RCBinaryOrder> {
    check_nonempty(x)?;
    let (n, m) = x.shape();
    let alpha_r = abs_row_means(x);
    let mut col = vec![0.0f64; m];
    for i in 0..n {
        let ar = alpha_r[i] as f64;
        if ar == 0.0 {
            continue;
        }
        for (c, &v) in col.iter_mut().zip(x.row(i)) {
            *c += (v as f64).abs() / ar;
        }
    }
    let alpha_c = col.iter().map(|&c| (c / n as f64) as f32).collect();
    Ok(RCBinaryOrder {
        alpha_r,
        alpha_c,
        signs: SignMatrix::sign_of(x),
    })
}

/// `f64` view of a target block used by the inner loops.
struct Target<'a> {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    mask: &'a SaliencyMask,
}

impl<'a> Target<'a> {
    fn new(x: &DenseMatrix, mask: &'a SaliencyMask) -> Result<Self> {
        if mask.shape() != x.shape() {
            return Err(Error::shape(format!(
                "saliency mask {:?} does not match block {:?}",
                mask.shape(),
                x.shape()
            )));
        }
        Ok(Self {
            rows: x.rows(),
            cols: x.cols(),
            values: x.data().iter().map(|&v| v as f64).collect(),
            mask,
        })
    }

    #[inline]
    fn weight_sq(&self, idx: usize) -> f64 {
        let w = self.mask.weight_at(idx);
        w * w
    }

    /// Target minus every order except `skip`.
    fn residual(&self, orders: &[RCBinaryOrder], skip: Option<usize>) -> Vec<f64> {
        let mut r = self.values.clone();
        for (q, o) in orders.iter().enumerate() {
            if Some(q) == skip {
                continue;
            }
            for i in 0..self.rows {
                for j in 0..self.cols {
                    r[i * self.cols + j] -= o.value(i, j);
                }
            }
        }
        r
    }

    fn loss(&self, orders: &[RCBinaryOrder]) -> f64 {
        self.residual(orders, None)
            .iter()
            .enumerate()
            .map(|(idx, e)| self.weight_sq(idx) * e * e)
            .sum()
    }
}

fn rows_update(t: &Target, x: &[f64], signs: &SignMatrix, alpha_c: &[f32], eps: f64) -> Vec<f32> {
    (0..t.rows)
        .map(|i| {
            let (mut u, mut v) = (0.0, 0.0);
            for j in 0..t.cols {
                let idx = i * t.cols + j;
                let w2 = t.weight_sq(idx);
                let c = alpha_c[j] as f64;
                u += w2 * x[idx] * signs.get(i, j) as f64 * c;
                v += w2 * c * c;
            }
            (u / (v + eps)) as f32
        })
        .collect()
}

fn cols_update(t: &Target, x: &[f64], signs: &SignMatrix, alpha_r: &[f32], eps: f64) -> Vec<f32> {
    let mut u = vec![0.0f64; t.cols];
    let mut v = vec![0.0f64; t.cols];
    for i in 0..t.rows {
        let r = alpha_r[i] as f64;
        for j in 0..t.cols {
            let idx = i * t.cols + j;
            let w2 = t.weight_sq(idx);
            u[j] += w2 * x[idx] * signs.get(i, j) as f64 * r;
            v[j] += w2 * r * r;
        }
    }
    u.iter().zip(&v).map(|(u, v)| (u / (v + eps)) as f32).collect()
}

fn check_update_shapes(x: &DenseMatrix, signs: &SignMatrix, rows: usize, cols: usize) -> Result<()> {
    if signs.rows() != x.rows() || signs.cols() != x.cols() || x.rows() != rows || x.cols() != cols {
        return Err(Error::shape("inconsistent shapes for scale update"));
    }
    Ok(())
}

/// Weighted least-squares row scales with `alpha_c` and `B` held fixed.
pub fn update_alpha_r(
    x: &DenseMatrix,
    signs: &SignMatrix,
    alpha_c: &[f32],
    mask: &SaliencyMask,
    epsilon: f64,
) -> Result<Vec<f32>> {
    check_update_shapes(x, signs, x.rows(), alpha_c.len())?;
    let t = Target::new(x, mask)?;
    Ok(rows_update(&t, &t.values, signs, alpha_c, epsilon))
}

/// Weighted least-squares column scales with `alpha_r` and `B` held fixed.
pub fn update_alpha_c(
    x: &DenseMatrix,
    signs: &SignMatrix,
    alpha_r: &[f32],
    mask: &SaliencyMask,
    epsilon: f64,
) -> Result<Vec<f32>> {
    check_update_shapes(x, signs, alpha_r.len(), x.cols())?;
    let t = Target::new(x, mask)?;
    Ok(cols_update(&t, &t.values, signs, alpha_r, epsilon))
}

/// Sign patterns for `order` terms, in tie-break priority: fewer `-1`
/// entries first, then lexicographic with `+1` before `-1`.
fn candidate_patterns(order: usize) -> Vec<[i8; MAX_ORDER]> {
    let mut pats: Vec<[i8; MAX_ORDER]> = (0..1u32 << order)
        .map(|bits| {
            let mut p = [1i8; MAX_ORDER];
            for (k, s) in p.iter_mut().enumerate().take(order) {
                // most significant bit maps to the first term
                if bits >> (order - 1 - k) & 1 == 1 {
                    *s = -1;
                }
            }
            p
        })
        .collect();
    pats.sort_by_key(|p| (p[..order].iter().filter(|&&s| s < 0).count(), p.map(|s| -s)));
    pats
}

/// Sign vector minimizing `|target - sum_k scales_k b_k|` over `{-1, +1}^K`.
pub fn search_signs(target: f64, scales: &[f64]) -> Vec<i8> {
    let k = scales.len();
    assert!((1..=MAX_ORDER).contains(&k), "search order {k} outside 1..=3");
    let pats = candidate_patterns(k);
    let mut best = pats[0];
    let mut best_err = f64::INFINITY;
    for p in pats {
        let v: f64 = scales.iter().zip(&p).map(|(s, &b)| s * b as f64).sum();
        let err = (target - v).abs();
        if err < best_err {
            best_err = err;
            best = p;
        }
    }
    best[..k].to_vec()
}

fn joint_sign_refresh(t: &Target, orders: &mut [RCBinaryOrder]) {
    let k = orders.len();
    let pats = candidate_patterns(k);
    let mut planes: Vec<Vec<i8>> = vec![Vec::with_capacity(t.rows * t.cols); k];
    let mut scales = [0.0f64; MAX_ORDER];
    for i in 0..t.rows {
        for j in 0..t.cols {
            for (s, o) in scales.iter_mut().zip(orders.iter()) {
                *s = o.alpha_r[i] as f64 * o.alpha_c[j] as f64;
            }
            let target = t.values[i * t.cols + j];
            let mut best = &pats[0];
            let mut best_err = f64::INFINITY;
            for p in &pats {
                let v: f64 = (0..k).map(|q| scales[q] * p[q] as f64).sum();
                let err = (target - v).abs();
                if err < best_err {
                    best_err = err;
                    best = p;
                }
            }
            for (plane, &b) in planes.iter_mut().zip(best.iter()) {
                plane.push(b);
            }
        }
    }
    for (o, plane) in orders.iter_mut().zip(planes) {
        o.signs = SignMatrix {
            rows: t.rows,
            cols: t.cols,
            data: plane,
        };
    }
}

/// Per-entry exhaustive sign search for `K` fixed `(alpha_r, alpha_c)` pairs.
pub fn update_b(w: &DenseMatrix, scale_sets: &[(&[f32], &[f32])]) -> Result<Vec<SignMatrix>> {
    let k = scale_sets.len();
    if !(1..=MAX_ORDER).contains(&k) {
        return Err(Error::invalid(format!("order {k} outside 1..=3")));
    }
    let (n, m) = w.shape();
    if scale_sets.iter().any(|(r, c)| r.len() != n || c.len() != m) {
        return Err(Error::shape("scale vectors do not match the weight shape"));
    }
    let mut orders: Vec<RCBinaryOrder> = scale_sets
        .iter()
        .map(|(r, c)| RCBinaryOrder {
            alpha_r: r.to_vec(),
            alpha_c: c.to_vec(),
            signs: SignMatrix::filled(n, m, 1),
        })
        .collect();
    let uniform = SaliencyMask::uniform(n, m);
    let t = Target::new(w, &uniform)?;
    joint_sign_refresh(&t, &mut orders);
    Ok(orders.into_iter().map(|o| o.signs).collect())
}

fn fit_orders(x: &DenseMatrix, mask: &SaliencyMask, cfg: &DaqConfig) -> Result<(Vec<RCBinaryOrder>, Vec<f64>)> {
    let t = Target::new(x, mask)?;
    let mut orders: Vec<RCBinaryOrder> = Vec::with_capacity(cfg.order);
    for _ in 0..cfg.order {
        let r = t.residual(&orders, None);
        let r = DenseMatrix::new(t.rows, t.cols, r.iter().map(|&v| v as f32).collect())?;
        orders.push(binary_rc_init(&r)?);
    }
    let mut trace = vec![t.loss(&orders)];
    for _ in 0..cfg.sweeps {
        for k in 0..orders.len() {
            let r = t.residual(&orders, Some(k));
            let alpha_r = rows_update(&t, &r, &orders[k].signs, &orders[k].alpha_c, cfg.epsilon);
            orders[k].alpha_r = alpha_r;
            let alpha_c = cols_update(&t, &r, &orders[k].signs, &orders[k].alpha_r, cfg.epsilon);
            orders[k].alpha_c = alpha_c;
        }
        joint_sign_refresh(&t, &mut orders);
        let prev = *trace.last().unwrap();
        let loss = t.loss(&orders);
        trace.push(loss);
        if prev <= 0.0 || (prev - loss) < cfg.tol * prev {
            break;
        }
    }
    Ok((orders, trace))
}

/// Single-term alternating re-scaling on `x` as given (no centering).
pub fn rsr_fit(x: &DenseMatrix, mask: &SaliencyMask, cfg: &DaqConfig) -> Result<DaqFit> {
    check_nonempty(x)?;
    let cfg = DaqConfig { order: 1, ..cfg.clone() };
    cfg.validate()?;
    let (orders, trace) = fit_orders(x, mask, &cfg)?;
    Ok(DaqFit {
        group: QuantizedGroup {
            orders,
            row_mean: None,
        },
        trace,
    })
}

/// Order-`K` fit of one block; optionally row-centered first.
pub fn daq_fit(w: &DenseMatrix, mask: &SaliencyMask, cfg: &DaqConfig) -> Result<DaqFit> {
    cfg.validate()?;
    check_nonempty(w)?;
    let row_mean = cfg.row_center.then(|| row_means(w));
    let centered = match &row_mean {
        Some(mu) => subtract_row_means(w, mu),
        None => w.clone(),
    };
    let (orders, trace) = fit_orders(&centered, mask, cfg)?;
    Ok(DaqFit {
        group: QuantizedGroup { orders, row_mean },
        trace,
    })
}

/// A layer quantized group by group with one shared row mean.
#[derive(Debug, Clone)]
pub struct QuantizedLayer {
    pub rows: usize,
    pub cols: usize,
    pub group_width: usize,
    pub row_mean: Option<Vec<f32>>,
    pub groups: Vec<QuantizedGroup>,
    pub traces: Vec<Vec<f64>>,
}

impl QuantizedLayer {
    pub fn dequantize(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        let mut col = 0;
        for g in &self.groups {
            let block = g.dequantize();
            out.set_column_block(col, &block).expect("group fits layer");
            col += block.cols();
        }
        if let Some(mu) = &self.row_mean {
            for (i, &m) in mu.iter().enumerate() {
                for v in out.row_mut(i) {
                    *v += m;
                }
            }
        }
        out
    }

    pub fn initial_loss(&self) -> f64 {
        self.traces.iter().map(|t| t[0]).sum()
    }

    pub fn final_loss(&self) -> f64 {
        self.traces.iter().map(|t| *t.last().unwrap()).sum()
    }
}

/// Quantizes every group of `w` at its allocated order. Row centering, when
/// enabled, is applied once over the whole layer.
pub fn daq_fit_layer(
    w: &DenseMatrix,
    mask: &SaliencyMask,
    partition: &GroupPartition,
    allocation: &BitAllocation,
    cfg: &DaqConfig,
) -> Result<QuantizedLayer> {
    check_nonempty(w)?;
    if partition.shape() != w.shape() {
        return Err(Error::shape("partition does not match weight"));
    }
    if allocation.bits.len() != partition.len() {
        return Err(Error::shape("allocation does not match partition"));
    }
    let row_mean = cfg.row_center.then(|| row_means(w));
    let centered = match &row_mean {
        Some(mu) => subtract_row_means(w, mu),
        None => w.clone(),
    };
    let fits: Vec<DaqFit> = partition
        .groups()
        .par_iter()
        .zip(allocation.bits.par_iter())
        .map(|(range, &bits)| {
            let block = centered.column_block(range.clone())?;
            let block_mask = mask.columns(range.clone())?;
            let group_cfg = DaqConfig {
                order: bits as usize,
                row_center: false,
                ..cfg.clone()
            };
            daq_fit(&block, &block_mask, &group_cfg)
        })
        .collect::<Result<_>>()?;
    let (groups, traces) = fits.into_iter().map(|f| (f.group, f.trace)).unzip();
    Ok(QuantizedLayer {
        rows: w.rows(),
        cols: w.cols(),
        group_width: partition.group_width(),
        row_mean,
        groups,
        traces,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::proxy_loss;
    use crate::tensor::Rng;

    fn mat(rows: &[&[f32]]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    fn close(a: f32, b: f64, tol: f64) -> bool {
        (a as f64 - b).abs() <= tol
    }

    #[test]
    fn classic_examples() {
        let c = classic_binarize(&mat(&[&[1.0, -1.0]]), true).unwrap();
        assert_eq!(c.row_mean, Some(vec![0.0]));
        assert_eq!(c.alpha_r, vec![1.0]);
        assert_eq!(c.signs.data(), &[1, -1]);
        assert_eq!(c.reconstruct().data(), &[1.0, -1.0]);

        let c = classic_binarize(&mat(&[&[2.0, 2.0]]), true).unwrap();
        assert_eq!(c.alpha_r, vec![0.0]);
        assert_eq!(c.reconstruct().data(), &[2.0, 2.0]);

        let c = classic_binarize(&mat(&[&[1.0, -2.0], &[3.0, 4.0]]), false).unwrap();
        assert_eq!(c.alpha_r, vec![1.5, 3.5]);
        assert_eq!(c.signs.data(), &[1, -1, 1, 1]);
    }

    #[test]
    fn rc_init_example() {
        let o = binary_rc_init(&mat(&[&[1.0, -2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(o.alpha_r, vec![1.5, 3.5]);
        // (1/1.5 + 3/3.5) / 2 and (2/1.5 + 4/3.5) / 2
        assert!(close(o.alpha_c[0], 0.761905, 1e-5));
        assert!(close(o.alpha_c[1], 1.238095, 1e-5));
        assert_eq!(o.signs.data(), &[1, -1, 1, 1]);
    }

    #[test]
    fn rc_init_constant_and_sign_symmetry() {
        let x = DenseMatrix::filled(3, 4, 2.5);
        let o = binary_rc_init(&x).unwrap();
        assert!(o.alpha_r.iter().all(|&a| a == 2.5));
        assert!(o.alpha_c.iter().all(|&a| a == 1.0));
        assert_eq!(o.reconstruct(), x);

        let mut rng = Rng::new(1, 0);
        let y = DenseMatrix::gaussian(5, 6, 1.0, &mut rng);
        let a = binary_rc_init(&y).unwrap();
        let b = binary_rc_init(&y.scaled(-1.0)).unwrap();
        assert_eq!(a.alpha_r, b.alpha_r);
        assert_eq!(a.alpha_c, b.alpha_c);
        assert_eq!(a.signs.negated(), b.signs);
    }

    #[test]
    fn rc_init_zero_row_is_guarded() {
        let o = binary_rc_init(&mat(&[&[0.0, 0.0], &[1.0, 3.0]])).unwrap();
        assert_eq!(o.alpha_r, vec![0.0, 2.0]);
        assert_eq!(o.alpha_c, vec![0.25, 0.75]);
        assert!(o.alpha_c.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn alpha_r_update_example() {
        let x = mat(&[&[1.0, -2.0], &[3.0, 4.0]]);
        let b = SignMatrix::new(2, 2, vec![1, -1, 1, 1]).unwrap();
        let c = [0.761905f32, 1.238095];
        let r = update_alpha_r(&x, &b, &c, &SaliencyMask::uniform(2, 2), 1e-8).unwrap();
        // frozen from an independent per-row weighted least squares evaluation
        assert!(close(r[0], 1.532189, 1e-5), "{r:?}");
        assert!(close(r[1], 3.424893, 1e-5), "{r:?}");
        assert!(close(r[0], 1.532133, 1e-4) && close(r[1], 3.424867, 1e-4));
    }

    #[test]
    fn alpha_r_reduces_to_classic_scale() {
        let x = mat(&[&[1.0, -2.0, 0.5], &[3.0, 4.0, -1.0]]);
        let b = SignMatrix::sign_of(&x);
        let r = update_alpha_r(&x, &b, &[1.0; 3], &SaliencyMask::uniform(2, 3), 1e-8).unwrap();
        assert!(close(r[0], 3.5 / 3.0, 1e-6) && close(r[1], 8.0 / 3.0, 1e-6));
    }

    #[test]
    fn heavier_column_weight_pulls_row_scale() {
        // row (1, 4) with unit column scales: unweighted optimum 2.5,
        // doubling the weight on column 1 moves it to (1 + 16) / (1 + 4) = 3.4
        let x = mat(&[&[1.0, 4.0]]);
        let b = SignMatrix::filled(1, 2, 1);
        let flat = update_alpha_r(&x, &b, &[1.0, 1.0], &SaliencyMask::uniform(1, 2), 1e-12).unwrap();
        let heavy = SaliencyMask::from_mask(1, 2, 2.0, vec![false, true]).unwrap();
        let tilted = update_alpha_r(&x, &b, &[1.0, 1.0], &heavy, 1e-12).unwrap();
        assert!(close(flat[0], 2.5, 1e-6));
        assert!(close(tilted[0], 3.4, 1e-6));
    }

    #[test]
    fn sign_search_examples() {
        let b = search_signs(0.6, &[0.5, 0.25]);
        assert_eq!(b, vec![1, 1]);
        assert_eq!(search_signs(-0.3, &[0.7]), vec![-1]);
        assert_eq!(search_signs(0.3, &[0.7]), vec![1]);
        assert_eq!(search_signs(0.3, &[0.4, 0.2, 0.1]), vec![1, -1, 1]);
        // exact tie between +1 and -1 prefers +1
        assert_eq!(search_signs(0.0, &[0.5]), vec![1]);
        // tie between (+,-) and (-,+) with equal scales prefers (+,-)
        assert_eq!(search_signs(0.0, &[0.5, 0.5]), vec![1, -1]);
    }

    #[test]
    fn candidate_order() {
        let p = candidate_patterns(2);
        let got: Vec<_> = p.iter().map(|p| [p[0], p[1]]).collect();
        assert_eq!(got, vec![[1, 1], [1, -1], [-1, 1], [-1, -1]]);
    }

    #[test]
    fn update_b_matches_search() {
        let w = mat(&[&[0.6, -0.1]]);
        let r1 = [1.0f32];
        let c1 = [0.5f32, 0.5];
        let r2 = [1.0f32];
        let c2 = [0.25f32, 0.25];
        let planes = update_b(&w, &[(&r1, &c1), (&r2, &c2)]).unwrap();
        assert_eq!(planes[0].data(), &[1, -1]);
        assert_eq!(planes[1].data(), &[1, 1]);
        assert!(update_b(&w, &[]).is_err());
    }

    #[test]
    fn rsr_exact_on_constant() {
        let x = DenseMatrix::filled(4, 4, -1.5);
        let fit = rsr_fit(&x, &SaliencyMask::uniform(4, 4), &DaqConfig::default()).unwrap();
        assert_eq!(fit.initial_loss(), 0.0);
        assert_eq!(fit.group.dequantize(), x);
    }

    #[test]
    fn k1_daq_equals_rsr_on_centered() {
        let mut rng = Rng::new(4, 0);
        let w = DenseMatrix::gaussian(16, 24, 1.0, &mut rng);
        let mask = SaliencyMask::uniform(16, 24);
        let cfg = DaqConfig {
            order: 1,
            ..DaqConfig::default()
        };
        let daq = daq_fit(&w, &mask, &cfg).unwrap();
        let centered = subtract_row_means(&w, daq.group.row_mean.as_ref().unwrap());
        let rsr = rsr_fit(&centered, &mask, &cfg).unwrap();
        assert_eq!(daq.group.orders, rsr.group.orders);
        assert_eq!(daq.trace, rsr.trace);
    }

    #[test]
    fn daq_rejects_bad_order() {
        let w = DenseMatrix::filled(2, 2, 1.0);
        let cfg = DaqConfig {
            order: 4,
            ..DaqConfig::default()
        };
        assert!(daq_fit(&w, &SaliencyMask::uniform(2, 2), &cfg).is_err());
        let cfg = DaqConfig {
            order: 0,
            ..DaqConfig::default()
        };
        assert!(daq_fit(&w, &SaliencyMask::uniform(2, 2), &cfg).is_err());
    }

    #[test]
    fn proxy_in_trace_matches_reconstruction() {
        let mut rng = Rng::new(6, 0);
        let w = DenseMatrix::gaussian(12, 20, 1.0, &mut rng);
        let mask = SaliencyMask::uniform(12, 20);
        let cfg = DaqConfig {
            row_center: false,
            ..DaqConfig::default()
        };
        let fit = daq_fit(&w, &mask, &cfg).unwrap();
        let direct = proxy_loss(&w, &fit.group.dequantize(), &mask).unwrap();
        assert!((direct - fit.final_loss()).abs() <= 1e-5 * fit.final_loss());
    }

    #[test]
    fn layer_fit_assembles_groups() {
        let mut rng = Rng::new(2, 0);
        let w = DenseMatrix::gaussian(8, 10, 1.0, &mut rng);
        let p = crate::abmp::partition(8, 10, 4).unwrap();
        let alloc = BitAllocation {
            bits: vec![3, 1, 2],
            k: 1,
        };
        let layer = daq_fit_layer(&w, &SaliencyMask::uniform(8, 10), &p, &alloc, &DaqConfig::default()).unwrap();
        assert_eq!(layer.groups.iter().map(|g| g.order()).collect::<Vec<_>>(), vec![3, 1, 2]);
        assert_eq!(layer.groups[2].shape(), (8, 2));
        let deq = layer.dequantize();
        let direct = proxy_loss(&w, &deq, &SaliencyMask::uniform(8, 10)).unwrap();
        assert!((direct - layer.final_loss()).abs() <= 1e-4 * layer.final_loss());
        assert!(layer.final_loss() <= layer.initial_loss());
    }
}
