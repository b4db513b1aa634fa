use alloc::vec::Vec;
// Float math comes from the trait on targets without inherent float methods.
use core::fmt;
#[allow(unused_imports)]
use num_traits::Float;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::Svd;

/// Function class a tokenwise map was fitted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MapClass {
    GlobalDiagPsd,
    LocalDiagPsd,
    LocalLowRank { rank: usize },
    Orthogonal,
    Mlp,
}

impl MapClass {
    /// Stable short tag used in file names and reports.
    pub fn tag(self) -> alloc::string::String {
        match self {
            MapClass::GlobalDiagPsd => "global_diag".into(),
            MapClass::LocalDiagPsd => "diag_psd".into(),
            MapClass::LocalLowRank { rank } => alloc::format!("lowrank_r{rank}"),
            MapClass::Orthogonal => "orthogonal".into(),
            MapClass::Mlp => "mlp".into(),
        }
    }

    pub fn is_linear(self) -> bool {
        !matches!(self, MapClass::Mlp)
    }
}

impl fmt::Display for MapClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MapClass::GlobalDiagPsd => f.write_str("GlobalDiagPSD"),
            MapClass::LocalDiagPsd => f.write_str("LocalDiagPSD"),
            MapClass::LocalLowRank { rank } => write!(f, "LocalLowRank(r={rank})"),
            MapClass::Orthogonal => f.write_str("Orthogonal"),
            MapClass::Mlp => f.write_str("MLP"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and its output.
    pub(crate) fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// `x ↦ W2 · act(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        let act = self.activation;
        let hidden = (&self.w1 * x + &self.b1).map(|v| act.apply(v));
        &self.w2 * hidden + &self.b2
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1, &self.w2].iter().all(|m| m.iter().all(|x| x.is_finite()))
            && [&self.b1, &self.b2].iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MapParams {
    /// Diagonal entries of `A`.
    Diagonal(DVector<f64>),
    /// Dense `d × d` matrix `A`.
    Linear(DMatrix<f64>),
    Mlp(MlpParams),
}

/// A fitted tokenwise transformation `T(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenwiseMap {
    pub class: MapClass,
    pub params: MapParams,
    /// SVD of the linear map `A`. For MLP maps this is the SVD of the output
    /// layer weight and only supports heuristic subspace metrics.
    pub svd: Option<Svd>,
    pub anchor_index: Option<usize>,
    /// All fitted inputs were identical.
    pub degenerate: bool,
    /// Built by blending anchor maps rather than fitted directly.
    pub interpolated: bool,
    /// Ridge strength used by the least-squares solve (0 when not applicable).
    pub ridge: f64,
}

impl TokenwiseMap {
    pub(crate) fn new(class: MapClass, params: MapParams, svd: Option<Svd>) -> TokenwiseMap {
        TokenwiseMap {
            class,
            params,
            svd,
            anchor_index: None,
            degenerate: false,
            interpolated: false,
            ridge: 0.0,
        }
    }

    /// Identity map of dimension `dim` in the diagonal class.
    pub fn identity(dim: usize) -> TokenwiseMap {
        let diag = DVector::from_element(dim, 1.0);
        let svd = diagonal_svd(&diag);
        TokenwiseMap::new(MapClass::LocalDiagPsd, MapParams::Diagonal(diag), Some(svd))
    }

    pub fn dim(&self) -> usize {
        match &self.params {
            MapParams::Diagonal(d) => d.len(),
            MapParams::Linear(a) => a.nrows(),
            MapParams::Mlp(p) => p.w2.nrows(),
        }
    }

    /// Dense matrix of a linear map; `None` for MLPs.
    pub fn linear_matrix(&self) -> Option<DMatrix<f64>> {
        match &self.params {
            MapParams::Diagonal(d) => Some(DMatrix::from_diagonal(d)),
            MapParams::Linear(a) => Some(a.clone()),
            MapParams::Mlp(_) => None,
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let dim = self.dim();
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: x.len(),
            });
        }
        Ok(match &self.params {
            MapParams::Diagonal(d) => x.iter().zip(d.iter()).map(|(a, b)| a * b).collect(),
            MapParams::Linear(a) => (a * DVector::from_column_slice(x)).data.into(),
            MapParams::Mlp(p) => p.forward(&DVector::from_column_slice(x)).data.into(),
        })
    }

    /// Checks the class invariants of a directly fitted map.
    pub fn validate(&self) -> Result<()> {
        match (&self.params, self.class) {
            (MapParams::Diagonal(d), _) => {
                if d.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                    return Err(Error::InvalidConfig("diagonal map has a negative entry".into()));
                }
            }
            (MapParams::Linear(a), MapClass::Orthogonal) if !self.interpolated => {
                let err = (a.transpose() * a - DMatrix::identity(a.ncols(), a.ncols())).norm();
                if err > 1e-6 {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "orthogonal map deviates from AᵀA = I by {err}"
                    )));
                }
            }
            (MapParams::Linear(_), MapClass::LocalLowRank { rank }) if !self.interpolated => {
                let svd = self
                    .svd
                    .as_ref()
                    .ok_or(Error::InvalidConfig("low-rank map without SVD".into()))?;
                let nonzero = svd.sigma.iter().filter(|&&s| s != 0.0).count();
                if nonzero > rank {
                    return Err(Error::InvalidConfig(alloc::format!(
                        "low-rank map stores {nonzero} singular values for rank {rank}"
                    )));
                }
            }
            (MapParams::Mlp(p), _) if !p.is_finite() => {
                return Err(Error::NonFinite("MLP parameters"));
            }
            _ => {}
        }
        Ok(())
    }
}

/// SVD of a diagonal matrix built directly: the left and right singular
/// vectors are the coordinate axes ordered by descending |entry|.
pub(crate) fn diagonal_svd(diag: &DVector<f64>) -> Svd {
    let n = diag.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| diag[b].abs().total_cmp(&diag[a].abs()).then(a.cmp(&b)));
    let mut u = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    let mut sigma = DVector::zeros(n);
    for (j, &i) in order.iter().enumerate() {
        u[(i, j)] = 1.0;
        v[(i, j)] = if diag[i] < 0.0 { -1.0 } else { 1.0 };
        sigma[j] = diag[i].abs();
    }
    Svd { u, sigma, v }
}
