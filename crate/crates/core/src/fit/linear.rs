//! Closed-form fitters for the linear map classes.

use nalgebra::{DMatrix, DVector};

use super::map::{diagonal_svd, MapClass, MapParams, TokenwiseMap};
use crate::error::{Error, Result};
use crate::linalg::{ridge_solve, Svd};
use crate::repr::LayerDataset;

/// Ridge strength for the unconstrained least-squares solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Ridge {
    /// `scale · trace(XᵀX) / d`.
    Relative(f64),
    Fixed(f64),
}

impl Default for Ridge {
    fn default() -> Self {
        Ridge::Relative(1e-6)
    }
}

impl Ridge {
    pub fn resolve(self, x: &DMatrix<f64>) -> f64 {
        match self {
            Ridge::Fixed(v) => v,
            Ridge::Relative(scale) => {
                let trace: f64 = x.iter().map(|v| v * v).sum();
                scale * trace / x.ncols().max(1) as f64
            }
        }
    }
}

pub(crate) fn check_pair(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::Empty("fit samples"));
    }
    if x.shape() != y.shape() {
        return Err(Error::DimensionMismatch {
            expected: x.ncols(),
            got: y.ncols(),
        });
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit samples"));
    }
    Ok(())
}

fn all_rows_identical(x: &DMatrix<f64>) -> bool {
    (1..x.nrows()).all(|i| x.row(i) == x.row(0))
}

/// Nonnegative diagonal least squares, solved per coordinate:
/// `D_ii = max(0, Σ x_i y_i / Σ x_i²)`, and `0` for an all-zero input column.
pub fn fit_diag_psd(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<TokenwiseMap> {
    check_pair(x, y)?;
    let diag = DVector::from_fn(x.ncols(), |i, _| {
        let xs = x.column(i);
        let ys = y.column(i);
        let sxx = xs.dot(&xs);
        if sxx == 0.0 {
            0.0
        } else {
            (xs.dot(&ys) / sxx).max(0.0)
        }
    });
    let svd = diagonal_svd(&diag);
    let mut map = TokenwiseMap::new(MapClass::LocalDiagPsd, MapParams::Diagonal(diag), Some(svd));
    map.degenerate = all_rows_identical(x);
    Ok(map)
}

/// Ridge least squares followed by truncation of its SVD to `rank`.
///
/// The unconstrained solution is truncated, not re-fitted. At `rank = d` the
/// returned matrix is the least-squares solution itself.
pub fn fit_low_rank(x: &DMatrix<f64>, y: &DMatrix<f64>, rank: usize, ridge: Ridge) -> Result<TokenwiseMap> {
    check_pair(x, y)?;
    let d = x.ncols();
    if rank == 0 || rank > d {
        return Err(Error::InvalidConfig(alloc::format!("rank {rank} outside 1..={d}")));
    }
    let lambda = ridge.resolve(x);
    let w = ridge_solve(x, y, lambda);
    let svd = Svd::of(&w);
    let a = if rank >= d { w } else { svd.reconstruct(rank) };
    let mut map = TokenwiseMap::new(
        MapClass::LocalLowRank { rank },
        MapParams::Linear(a),
        Some(svd.truncated(rank)),
    );
    map.degenerate = all_rows_identical(x);
    map.ridge = lambda;
    Ok(map)
}

/// Orthogonal Procrustes over the full orthogonal group: with
/// `M = Σ yⱼ xⱼᵀ = U Σ Vᵀ`, the minimizer is `Q = U Vᵀ`.
pub fn fit_orthogonal(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<TokenwiseMap> {
    check_pair(x, y)?;
    let cross = y.transpose() * x;
    let svd = Svd::of(&cross);
    let q = &svd.u * svd.v.transpose();
    let d = q.nrows();
    // Every singular value of Q is 1, so any orthonormal basis is a valid U.
    let factors = Svd {
        u: DMatrix::identity(d, d),
        sigma: DVector::from_element(d, 1.0),
        v: q.transpose(),
    };
    let mut map = TokenwiseMap::new(MapClass::Orthogonal, MapParams::Linear(q), Some(factors));
    map.degenerate = all_rows_identical(x);
    Ok(map)
}

/// One nonnegative diagonal map fitted over every pair of the layer.
pub fn fit_global_diag(dataset: &LayerDataset) -> Result<TokenwiseMap> {
    let mut map = fit_diag_psd(&dataset.inputs(), &dataset.targets())?;
    map.class = MapClass::GlobalDiagPsd;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr::{ReprPair, Split};
    use alloc::vec;
    use alloc::vec::Vec;

    fn rows(n: usize, d: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(n, d, v)
    }

    fn diag_of(map: &TokenwiseMap) -> Vec<f64> {
        match &map.params {
            MapParams::Diagonal(d) => d.iter().copied().collect(),
            _ => panic!("not diagonal"),
        }
    }

    #[test]
    fn diag_identity_and_examples() {
        let x = rows(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 1.0]);
        assert_eq!(diag_of(&fit_diag_psd(&x, &x).unwrap()), vec![1.0, 1.0]);

        let x = rows(2, 2, &[1.0, 2.0, 2.0, 0.0]);
        let y = rows(2, 2, &[2.0, 2.0, 4.0, 0.0]);
        assert_eq!(diag_of(&fit_diag_psd(&x, &y).unwrap()), vec![2.0, 1.0]);

        let x = rows(2, 1, &[1.0, 2.0]);
        let y = rows(2, 1, &[-1.0, -2.0]);
        assert_eq!(diag_of(&fit_diag_psd(&x, &y).unwrap()), vec![0.0]);
    }

    #[test]
    fn diag_zero_column_convention() {
        let x = rows(2, 2, &[0.0, 1.0, 0.0, 2.0]);
        let y = rows(2, 2, &[5.0, 1.0, 5.0, 2.0]);
        assert_eq!(diag_of(&fit_diag_psd(&x, &y).unwrap()), vec![0.0, 1.0]);
    }

    #[test]
    fn low_rank_full_rank_is_least_squares() {
        let x = rows(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 2.0]);
        let y = rows(3, 2, &[0.5, 1.0, 2.0, -1.0, 3.0, 0.0]);
        let map = fit_low_rank(&x, &y, 2, Ridge::Fixed(0.0)).unwrap();
        assert_eq!(map.linear_matrix().unwrap(), ridge_solve(&x, &y, 0.0));
    }

    #[test]
    fn low_rank_truncates_diagonal() {
        let x = rows(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let y = rows(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let map = fit_low_rank(&x, &y, 1, Ridge::Fixed(0.0)).unwrap();
        let a = map.linear_matrix().unwrap();
        assert!((a - rows(2, 2, &[3.0, 0.0, 0.0, 0.0])).norm() < 1e-12);
        map.validate().unwrap();
    }

    #[test]
    fn low_rank_zero_targets() {
        let x = rows(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 2.0]);
        let y = DMatrix::zeros(3, 2);
        let map = fit_low_rank(&x, &y, 1, Ridge::default()).unwrap();
        assert_eq!(map.linear_matrix().unwrap().norm(), 0.0);
    }

    #[test]
    fn low_rank_rejects_bad_rank() {
        let x = rows(1, 2, &[1.0, 0.0]);
        assert!(fit_low_rank(&x, &x, 0, Ridge::default()).is_err());
        assert!(fit_low_rank(&x, &x, 3, Ridge::default()).is_err());
    }

    #[test]
    fn degenerate_neighborhood_is_flagged() {
        let x = rows(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let y = rows(3, 2, &[2.0, 1.0, 2.0, 1.0, 2.0, 1.0]);
        let lr = fit_low_rank(&x, &y, 2, Ridge::default()).unwrap();
        assert!(lr.degenerate);
        assert!(lr.linear_matrix().unwrap().iter().all(|v| v.is_finite()));
        assert!(fit_diag_psd(&x, &y).unwrap().degenerate);
    }

    #[test]
    fn orthogonal_examples() {
        let x = rows(3, 2, &[1.0, 0.0, 0.3, 1.0, -2.0, 0.5]);
        let q = fit_orthogonal(&x, &x).unwrap().linear_matrix().unwrap();
        assert!((q - DMatrix::identity(2, 2)).norm() < 1e-12);

        let r90 = rows(2, 2, &[0.0, -1.0, 1.0, 0.0]);
        let y = &x * r90.transpose();
        let q = fit_orthogonal(&x, &y).unwrap().linear_matrix().unwrap();
        assert!((q - &r90).norm() < 1e-12);

        let flip = rows(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let y = &x * flip.transpose();
        let map = fit_orthogonal(&x, &y).unwrap();
        map.validate().unwrap();
        assert!((map.linear_matrix().unwrap() - &flip).norm() < 1e-12);
        let svd = map.svd.as_ref().unwrap();
        assert!((svd.reconstruct(2) - flip).norm() < 1e-12);
    }

    #[test]
    fn global_diag_examples() {
        let pair = |seq_id, h_in: Vec<f32>, h_out: Vec<f32>| ReprPair {
            seq_id,
            pos: 0,
            token_id: 0,
            h_in,
            h_out,
        };
        let ds = LayerDataset::new(
            0,
            2,
            Split::Train,
            vec![
                pair(0, vec![1.0, 2.0], vec![2.0, 4.0]),
                pair(1, vec![-1.0, 0.5], vec![-2.0, 1.0]),
            ],
        )
        .unwrap();
        let map = fit_global_diag(&ds).unwrap();
        assert_eq!(map.class, MapClass::GlobalDiagPsd);
        assert_eq!(diag_of(&map), vec![2.0, 2.0]);

        let single = LayerDataset::new(0, 2, Split::Train, vec![pair(0, vec![1.0, 2.0], vec![3.0, 1.0])]).unwrap();
        assert_eq!(
            diag_of(&fit_global_diag(&single).unwrap()),
            diag_of(&fit_diag_psd(&single.inputs(), &single.targets()).unwrap())
        );
    }
}
