mod common;

use maskquant::abmp::partition;
use maskquant::stats::{block_scores, build_importance_mask, importance_matrix, proxy_loss, SecondMoment};
use maskquant::{DenseMatrix, Rng};
use nalgebra::DMatrix;

fn moment_from(x: &DenseMatrix) -> SecondMoment {
    let mut sm = SecondMoment::new(x.rows());
    sm.accumulate(x).unwrap();
    sm
}

#[test]
fn damped_inverse_diagonal_matches_dense_inverse() {
    for seed in 0..8 {
        let mut rng = Rng::new(1, seed);
        let m = 3 + rng.below(30) as usize;
        // fewer tokens than features on odd seeds: singular before damping
        let tokens = if seed % 2 == 0 { 4 * m } else { m / 2 + 1 };
        let sm = moment_from(&DenseMatrix::gaussian(m, tokens, 1.0, &mut rng));
        let got = sm.damped_inverse_diag(0.01).unwrap();

        let s = DMatrix::from_row_slice(m, m, sm.matrix());
        let gamma = 0.01 * s.diagonal().mean();
        let inv = (s + DMatrix::identity(m, m) * gamma).try_inverse().unwrap();
        for j in 0..m {
            let rel = (got[j] - inv[(j, j)]).abs() / inv[(j, j)];
            assert!(rel < 1e-9, "seed {seed} j {j}: {} vs {}", got[j], inv[(j, j)]);
        }
    }
}

#[test]
fn all_zero_moment_is_rejected() {
    let sm = SecondMoment::new(4);
    assert!(sm.damped_inverse_diag(0.01).is_err());
}

#[test]
fn shard_merge_is_exact_on_dyadic_inputs() {
    let mut rng = Rng::new(2, 0);
    let (m, tokens) = (12, 300);
    // multiples of 1/8 in [-4, 4): every partial sum is exact in f64
    let data = (0..m * tokens).map(|_| (rng.below(64) as f32 - 32.0) / 8.0).collect();
    let x = DenseMatrix::new(m, tokens, data).unwrap();
    let whole = moment_from(&x);
    let mut merged = SecondMoment::new(m);
    for start in (0..tokens).step_by(37) {
        let end = (start + 37).min(tokens);
        let cols: Vec<f32> = (0..m).flat_map(|i| x.row(i)[start..end].to_vec()).collect();
        merged.merge_in_place(&moment_from(&DenseMatrix::new(m, end - start, cols).unwrap())).unwrap();
    }
    assert_eq!(merged.count(), whole.count());
    assert_eq!(merged.matrix(), whole.matrix());
}

#[test]
fn shard_merge_is_close_on_gaussian_inputs() {
    let mut rng = Rng::new(3, 0);
    let x = DenseMatrix::gaussian(10, 500, 1.0, &mut rng);
    let whole = moment_from(&x);
    let (a, b) = (x.column_block(0..0).unwrap(), x.clone());
    let halves: Vec<SecondMoment> = [0..211, 211..500]
        .into_iter()
        .map(|r| {
            let cols: Vec<f32> = (0..10).flat_map(|i| b.row(i)[r.clone()].to_vec()).collect();
            moment_from(&DenseMatrix::new(10, r.len(), cols).unwrap())
        })
        .collect();
    assert_eq!(a.cols(), 0);
    let merged = halves[0].merge(&halves[1]).unwrap();
    for (u, v) in merged.matrix().iter().zip(whole.matrix()) {
        assert!((u - v).abs() <= 1e-12 * v.abs().max(1.0));
    }
}

#[test]
fn mask_flags_three_sigma_outliers_of_importance() {
    let mut rng = Rng::new(4, 0);
    let (n, m) = (40, 24);
    let w = DenseMatrix::gaussian(n, m, 1.0, &mut rng);
    let sm = moment_from(&DenseMatrix::gaussian(m, 200, 1.0, &mut rng));
    let d = sm.damped_inverse_diag(0.01).unwrap();
    let z = importance_matrix(&w, &d).unwrap();
    for i in 0..n {
        for j in 0..m {
            let want = (w.get(i, j) as f64 / d[j]).powi(2);
            assert!((z.get(i, j) as f64 - want).abs() <= 1e-6 * want.max(1e-30));
        }
    }
    let vals: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    let mask = build_importance_mask(&z, 2.0).unwrap();
    let mut flagged = 0;
    for (idx, &v) in vals.iter().enumerate() {
        let want = (v - mean).abs() > 3.0 * sd;
        assert_eq!(mask.mask()[idx], want, "entry {idx}");
        flagged += want as usize;
        assert_eq!(mask.weight_at(idx), if want { 2.0 } else { 1.0 });
    }
    assert!(flagged > 0);

    let w_hat = DenseMatrix::zeros(n, m);
    let want: f64 = (0..n * m).map(|k| mask.weight_at(k).powi(2) * (w.data()[k] as f64).powi(2)).sum();
    let got = proxy_loss(&w, &w_hat, &mask).unwrap();
    assert!((got - want).abs() <= 1e-9 * want);
}

#[test]
fn constant_importance_has_no_outliers() {
    let z = DenseMatrix::filled(5, 7, 3.0);
    let mask = build_importance_mask(&z, 2.0).unwrap();
    assert!(mask.is_uniform());
    assert_eq!(mask.outlier_fraction(), 0.0);
}

#[test]
fn block_scores_sum_each_group() {
    let mut rng = Rng::new(5, 0);
    let z = DenseMatrix::new(6, 300, (0..1800).map(|_| rng.uniform() as f32).collect()).unwrap();
    let parts = partition(6, 300, 128).unwrap();
    let scores = block_scores(&z, &parts).unwrap();
    assert_eq!(scores.len(), 3);
    for (g, r) in parts.groups().iter().enumerate() {
        let want: f64 = (0..6).flat_map(|i| r.clone().map(move |j| (i, j))).map(|(i, j)| z.get(i, j) as f64).sum();
        assert!((scores[g] - want).abs() <= 1e-9 * want);
    }
}
