//! One-hidden-layer tokenwise network trained by full-batch gradient descent.

use alloc::vec;
use alloc::vec::Vec;

// Float math comes from the trait on targets without inherent float methods.
use nalgebra::{DMatrix, DVector};
#[allow(unused_imports)]
use num_traits::Float;
use rand_distr::{Distribution, StandardNormal};

use super::linear::check_pair;
use super::map::{Activation, MapClass, MapParams, MlpParams, TokenwiseMap};
use crate::error::{Error, Result};
use crate::linalg::Svd;
use crate::repr::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlpConfig {
    /// Hidden width; `None` uses the input dimension.
    pub hidden: Option<usize>,
    pub activation: Activation,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: None,
            activation: Activation::Tanh,
            steps: 500,
            step_size: 1e-2,
            seed: 0,
        }
    }
}

/// Seeded initialization: `W1 ~ N(0, 1/d)`, everything else zero, so the
/// untrained map outputs the zero vector.
pub fn init_mlp(dim: usize, cfg: &MlpConfig) -> MlpParams {
    let hidden = cfg.hidden.unwrap_or(dim);
    let mut rng = rng(cfg.seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let w1 = DMatrix::from_fn(hidden, dim, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z * scale
    });
    MlpParams {
        w1,
        b1: DVector::zeros(hidden),
        w2: DMatrix::zeros(dim, hidden),
        b2: DVector::zeros(dim),
        activation: cfg.activation,
    }
}

struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    fn new(len: usize) -> Self {
        AdamSlot {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn step(&mut self, param: &mut [f64], grad: &[f64], lr: f64, t: i32) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        let c1 = 1.0 - B1.powi(t);
        let c2 = 1.0 - B2.powi(t);
        for ((p, g), (m, v)) in param.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = B1 * *m + (1.0 - B1) * g;
            *v = B2 * *v + (1.0 - B2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
        }
    }
}

/// Mean squared reconstruction error `(1/n) Σ‖yⱼ − f(xⱼ)‖²`.
pub fn mlp_loss(params: &MlpParams, x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    let (_, _, out) = batch_forward(params, x);
    (out - y).norm_squared() / x.nrows() as f64
}

fn batch_forward(p: &MlpParams, x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mut pre = x * p.w1.transpose();
    for i in 0..n {
        let mut row = pre.row_mut(i);
        row += p.b1.transpose();
    }
    let act = p.activation;
    let hidden = pre.map(|v| act.apply(v));
    let mut out = &hidden * p.w2.transpose();
    for i in 0..n {
        let mut row = out.row_mut(i);
        row += p.b2.transpose();
    }
    (pre, hidden, out)
}

/// Fits the network with the Adam update rule on the full batch. Deterministic
/// given `cfg.seed`. The returned SVD factors are those of the output-layer
/// weight, whose left singular vectors live in the representation space.
pub fn fit_mlp(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &MlpConfig) -> Result<TokenwiseMap> {
    check_pair(x, y)?;
    if cfg.hidden == Some(0) {
        return Err(Error::InvalidConfig("MLP hidden width must be positive".into()));
    }
    let n = x.nrows() as f64;
    let mut p = init_mlp(x.ncols(), cfg);
    let mut slots = [
        AdamSlot::new(p.w1.len()),
        AdamSlot::new(p.b1.len()),
        AdamSlot::new(p.w2.len()),
        AdamSlot::new(p.b2.len()),
    ];

    for step in 0..cfg.steps {
        let (pre, hidden, out) = batch_forward(&p, x);
        let err = out - y;
        let loss = err.norm_squared() / n;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        let d_out = err * (2.0 / n);
        let g_w2 = d_out.transpose() * &hidden;
        let g_b2: Vec<f64> = d_out.column_iter().map(|c| c.sum()).collect();
        let d_hidden = &d_out * &p.w2;
        let act = p.activation;
        let d_pre = DMatrix::from_fn(pre.nrows(), pre.ncols(), |i, j| {
            d_hidden[(i, j)] * act.derivative(pre[(i, j)], hidden[(i, j)])
        });
        let g_w1 = d_pre.transpose() * x;
        let g_b1: Vec<f64> = d_pre.column_iter().map(|c| c.sum()).collect();

        let t = (step + 1) as i32;
        let lr = cfg.step_size;
        slots[0].step(p.w1.as_mut_slice(), g_w1.as_slice(), lr, t);
        slots[1].step(p.b1.as_mut_slice(), &g_b1, lr, t);
        slots[2].step(p.w2.as_mut_slice(), g_w2.as_slice(), lr, t);
        slots[3].step(p.b2.as_mut_slice(), &g_b2, lr, t);
    }
    if !p.is_finite() {
        return Err(Error::Diverged { step: cfg.steps });
    }

    let svd = Svd::of(&p.w2);
    Ok(TokenwiseMap::new(MapClass::Mlp, MapParams::Mlp(p), Some(svd)))
}
