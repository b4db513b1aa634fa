//! Dense helpers on top of `nalgebra`: vector arithmetic on slices, a
//! deterministically ordered SVD, and the ridge least-squares solve used by
//! the linear map fitters.

use alloc::vec::Vec;
// Float math comes from the trait on targets without inherent float methods.
use core::cmp::Ordering;
#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{DMatrix, DVector};

/// Norms below this are treated as zero throughout the crate.
pub const ZERO_NORM: f64 = 1e-12;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

/// Stacks equally sized rows into an `n × d` matrix.
pub fn rows_to_matrix<'a, I>(rows: I, dim: usize) -> DMatrix<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let flat: Vec<f64> = rows.into_iter().flat_map(|r| r.iter().copied()).collect();
    DMatrix::from_row_slice(flat.len() / dim.max(1), dim, &flat)
}

/// Singular value decomposition `M = U diag(sigma) Vᵀ`.
///
/// `u` is always a full `rows × rows` orthogonal basis so that projections onto
/// the top-`k` left singular vectors are defined for every `k ≤ rows`.
/// Singular values are nonincreasing. Each left singular vector is
/// sign-normalized so that its first nonzero component is positive; runs of
/// equal singular values are ordered by descending lexicographic order of
/// those normalized vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn of(m: &DMatrix<f64>) -> Svd {
        let (rows, cols) = m.shape();
        // nalgebra only returns min(rows, cols) left vectors; pad so U is square.
        let padded = if cols < rows {
            let mut p = DMatrix::zeros(rows, rows);
            p.view_mut((0, 0), (rows, cols)).copy_from(m);
            p
        } else {
            m.clone()
        };
        let width = padded.ncols();

        if padded.iter().all(|&x| x == 0.0) {
            return Svd {
                u: DMatrix::identity(rows, rows),
                sigma: DVector::zeros(rows),
                v: DMatrix::identity(width, rows),
            };
        }

        let svd = padded.svd(true, true);
        let mut u = svd.u.expect("u requested");
        let mut v = svd.v_t.expect("v_t requested").transpose();
        let sigma = svd.singular_values;

        for j in 0..rows {
            let first = u.column(j).iter().copied().find(|x| x.abs() > ZERO_NORM);
            if first.is_some_and(|x| x < 0.0) {
                u.column_mut(j).neg_mut();
                v.column_mut(j).neg_mut();
            }
        }

        let order = tie_ordered(&sigma, &u);
        let u_sorted = DMatrix::from_fn(rows, rows, |i, j| u[(i, order[j])]);
        let v_sorted = DMatrix::from_fn(width, rows, |i, j| v[(i, order[j])]);
        let sigma_sorted = DVector::from_fn(rows, |j, _| sigma[order[j]]);
        Svd {
            u: u_sorted,
            sigma: sigma_sorted,
            v: v_sorted,
        }
    }

    /// Same factors with every singular value past `rank` set to zero.
    pub fn truncated(&self, rank: usize) -> Svd {
        let mut out = self.clone();
        for j in rank.min(out.sigma.len())..out.sigma.len() {
            out.sigma[j] = 0.0;
        }
        out
    }

    /// `U_r diag(sigma_r) V_rᵀ` over the first `rank` triplets.
    pub fn reconstruct(&self, rank: usize) -> DMatrix<f64> {
        let r = rank.min(self.sigma.len());
        let u = self.u.columns(0, r);
        let v = self.v.columns(0, r);
        let scaled = DMatrix::from_fn(u.nrows(), r, |i, j| u[(i, j)] * self.sigma[j]);
        scaled * v.transpose()
    }

    /// Number of singular values above `tol · sigma_max`.
    pub fn numerical_rank(&self, tol: f64) -> usize {
        let top = self.sigma.iter().copied().fold(0.0, f64::max);
        if top == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > tol * top).count()
    }
}

fn tie_ordered(sigma: &DVector<f64>, u: &DMatrix<f64>) -> Vec<usize> {
    let n = sigma.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let scale = sigma.iter().copied().fold(1.0, f64::max);
    let tol = 1e-12 * scale;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && (sigma[order[start]] - sigma[order[end]]).abs() <= tol {
            end += 1;
        }
        order[start..end].sort_by(|&a, &b| lex_desc(u, a, b));
        start = end;
    }
    order
}

fn lex_desc(u: &DMatrix<f64>, a: usize, b: usize) -> Ordering {
    for i in 0..u.nrows() {
        match u[(i, b)].total_cmp(&u[(i, a)]) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    a.cmp(&b)
}

/// Ridge least squares for a map acting on column vectors.
///
/// Rows of `x` and `y` are paired samples. Returns `W` minimizing
/// `Σ‖yⱼ − W xⱼ‖² + ridge·‖W‖²_F`, i.e. `W = (YᵀX)(XᵀX + ridge·I)⁻¹`. When the
/// regularized Gram matrix is singular the minimum-norm solution is returned.
pub fn ridge_solve(x: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let d_in = x.ncols();
    let mut gram = x.transpose() * x;
    for i in 0..d_in {
        gram[(i, i)] += ridge;
    }
    let cross_t = x.transpose() * y; // (YᵀX)ᵀ
    if ridge > 0.0 {
        if let Some(chol) = gram.clone().cholesky() {
            return chol.solve(&cross_t).transpose();
        }
    }
    let trace: f64 = gram.diagonal().iter().sum();
    let eps = (trace.abs() * f64::EPSILON * d_in as f64).max(f64::MIN_POSITIVE);
    let pinv = gram
        .pseudo_inverse(eps)
        .expect("pseudo-inverse with nonnegative tolerance");
    (pinv * cross_t).transpose()
}
