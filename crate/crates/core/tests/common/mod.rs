#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Tokens as rows: returns `(X, Y)` with `Y = X Aᵀ + noise`.
pub fn linear_pairs(rng: &mut ChaCha8Rng, a: &DMatrix<f64>, n: usize, noise: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let d = a.ncols();
    let x = normal_matrix(rng, n, d);
    let y = &x * a.transpose() + normal_matrix(rng, n, d) * noise;
    (x, y)
}

/// `Σ_j ‖y_j − A x_j‖²` for tokens stored as rows.
pub fn objective(x: &DMatrix<f64>, y: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    (y - x * a.transpose()).norm_squared()
}
