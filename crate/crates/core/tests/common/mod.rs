#![allow(dead_code)]

use maskquant::stats::SaliencyMask;
use maskquant::{DenseMatrix, Rng};

pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    DenseMatrix::gaussian(rows, cols, 1.0, rng)
}

/// Student-t entries with three degrees of freedom.
pub fn heavy_tailed(rows: usize, cols: usize, rng: &mut Rng) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| {
            let z = rng.gaussian();
            let chi: f64 = (0..3).map(|_| rng.gaussian().powi(2)).sum();
            (z / (chi / 3.0).sqrt()) as f32
        })
        .collect();
    DenseMatrix::new(rows, cols, data).unwrap()
}

/// Roughly `frac` of entries flagged, weight `lambda`.
pub fn random_mask(rows: usize, cols: usize, frac: f64, lambda: f64, rng: &mut Rng) -> SaliencyMask {
    let mask = (0..rows * cols).map(|_| rng.bernoulli(frac)).collect();
    SaliencyMask::from_mask(rows, cols, lambda, mask).unwrap()
}

/// `sum_ij Lambda_ij^2 (x_ij - y_ij)^2` in f64.
pub fn weighted_sq(x: &DenseMatrix, y: &[f64], mask: &SaliencyMask) -> f64 {
    x.data()
        .iter()
        .zip(y)
        .enumerate()
        .map(|(idx, (&a, &b))| {
            let l = mask.weight_at(idx);
            l * l * (a as f64 - b).powi(2)
        })
        .sum()
}

pub fn dense_f64(m: &DenseMatrix) -> Vec<f64> {
    m.data().iter().map(|&v| v as f64).collect()
}

pub fn rel_frobenius(w: &DenseMatrix, w_hat: &DenseMatrix) -> f64 {
    let num: f64 = w.data().iter().zip(w_hat.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    let den: f64 = w.data().iter().map(|&a| (a as f64).powi(2)).sum();
    (num / den).sqrt()
}
