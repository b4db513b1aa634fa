//! Neighborhood-local fitting and distance-weighted blending of anchor maps.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use super::linear::{fit_diag_psd, fit_low_rank, fit_orthogonal, Ridge};
use super::map::{diagonal_svd, MapClass, MapParams, TokenwiseMap};
use super::mlp::{fit_mlp, MlpConfig};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Svd, ZERO_NORM};
use crate::neighborhood::{NeighborIndex, Neighborhood};
use crate::repr::LayerDataset;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    pub class: MapClass,
    /// Neighborhood size.
    pub k: usize,
    pub ridge: Ridge,
    pub mlp: MlpConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            class: MapClass::LocalLowRank { rank: 8 },
            k: 64,
            ridge: Ridge::default(),
            mlp: MlpConfig::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("neighborhood size k must be at least 1".into()));
        }
        if let MapClass::LocalLowRank { rank } = self.class {
            if rank == 0 || rank > dim {
                return Err(Error::InvalidConfig(alloc::format!("rank {rank} outside 1..={dim}")));
            }
        }
        match self.ridge {
            Ridge::Relative(v) | Ridge::Fixed(v) if v < 0.0 || !v.is_finite() => {
                Err(Error::InvalidConfig("ridge must be finite and nonnegative".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Fits the configured class to `(X, Y)` rows.
pub fn fit_class(x: &DMatrix<f64>, y: &DMatrix<f64>, cfg: &FitConfig) -> Result<TokenwiseMap> {
    match cfg.class {
        MapClass::LocalDiagPsd => fit_diag_psd(x, y),
        MapClass::LocalLowRank { rank } => fit_low_rank(x, y, rank, cfg.ridge),
        MapClass::Orthogonal => fit_orthogonal(x, y),
        MapClass::Mlp => fit_mlp(x, y, &cfg.mlp),
        MapClass::GlobalDiagPsd => Err(Error::UnsupportedClass {
            op: "neighborhood fitting",
            class: cfg.class,
        }),
    }
}

fn gather(dataset: &LayerDataset, hood: &Neighborhood) -> (DMatrix<f64>, DMatrix<f64>) {
    let pairs = dataset.pairs();
    let d = dataset.dim();
    let k = hood.member_indices.len();
    let x = DMatrix::from_fn(k, d, |i, j| f64::from(pairs[hood.member_indices[i]].h_in[j]));
    let y = DMatrix::from_fn(k, d, |i, j| f64::from(pairs[hood.member_indices[i]].h_out[j]));
    (x, y)
}

/// Fits a map on the `k` dataset pairs whose inputs are most cosine-similar to
/// `query`. `index` must be built over `dataset`'s inputs.
pub fn fit_local(
    dataset: &LayerDataset,
    index: &NeighborIndex,
    query: &[f64],
    cfg: &FitConfig,
) -> Result<TokenwiseMap> {
    let hood = index.knn(query, cfg.k)?;
    let (x, y) = gather(dataset, &hood);
    fit_class(&x, &y, cfg)
}

/// Fits the map for dataset entry `anchor` over its own neighborhood (which
/// contains the anchor).
pub fn fit_anchor(
    dataset: &LayerDataset,
    index: &NeighborIndex,
    anchor: usize,
    cfg: &FitConfig,
) -> Result<TokenwiseMap> {
    if index.len() != dataset.len() {
        return Err(Error::DimensionMismatch {
            expected: dataset.len(),
            got: index.len(),
        });
    }
    let hood = index.knn_of_key(anchor, cfg.k)?;
    let (x, y) = gather(dataset, &hood);
    let mut map = fit_class(&x, &y, cfg)?;
    map.anchor_index = Some(anchor);
    Ok(map)
}

/// Normalized inverse-distance weights `wᵢ ∝ 1/(dᵢ + 1e-8)`.
pub fn interpolation_weights(distances: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = distances.iter().map(|d| 1.0 / (d + 1e-8)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| w / total).collect()
}

fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na < ZERO_NORM || nb < ZERO_NORM {
        return None;
    }
    Some(1.0 - dot(a, b) / (na * nb))
}

/// Blends the maps of the `p` anchors nearest to `query` in cosine distance.
///
/// A query within `1e-12` of an anchor returns that anchor's map unchanged.
/// Only linear classes can be blended.
pub fn interpolate_maps(anchors: &[(TokenwiseMap, Vec<f64>)], query: &[f64], p: usize) -> Result<TokenwiseMap> {
    if anchors.is_empty() || p == 0 {
        return Err(Error::Empty("interpolation anchors"));
    }
    if let Some((map, _)) = anchors.iter().find(|(m, _)| !m.class.is_linear()) {
        return Err(Error::UnsupportedClass {
            op: "interpolation",
            class: map.class,
        });
    }
    let class = anchors[0].0.class;
    let dim = anchors[0].0.dim();
    if query.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: query.len(),
        });
    }
    let mut scored = Vec::with_capacity(anchors.len());
    for (i, (map, at)) in anchors.iter().enumerate() {
        if map.dim() != dim || at.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: at.len(),
            });
        }
        if map.class != class {
            return Err(Error::InvalidConfig("interpolated anchors must share a class".into()));
        }
        if let Some(dist) = cosine_distance(query, at) {
            scored.push((dist, i));
        }
    }
    if scored.is_empty() {
        return Err(Error::ZeroQuery);
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.truncate(p);

    if let Some(&(d, i)) = scored.first() {
        if d < 1e-12 {
            return Ok(anchors[i].0.clone());
        }
    }

    let weights = interpolation_weights(&scored.iter().map(|s| s.0).collect::<Vec<_>>());
    let diagonal = scored
        .iter()
        .all(|&(_, i)| matches!(anchors[i].0.params, MapParams::Diagonal(_)));

    let (params, svd) = if diagonal {
        let mut acc = nalgebra::DVector::zeros(dim);
        for (&(_, i), w) in scored.iter().zip(&weights) {
            if let MapParams::Diagonal(dv) = &anchors[i].0.params {
                acc += dv * *w;
            }
        }
        let svd = diagonal_svd(&acc);
        (MapParams::Diagonal(acc), svd)
    } else {
        let mut acc = DMatrix::zeros(dim, dim);
        for (&(_, i), w) in scored.iter().zip(&weights) {
            let a = anchors[i].0.linear_matrix().expect("linear class");
            acc += a * *w;
        }
        let svd = Svd::of(&acc);
        (MapParams::Linear(acc), svd)
    };
    let mut map = TokenwiseMap::new(class, params, Some(svd));
    map.interpolated = true;
    map.ridge = scored
        .iter()
        .zip(&weights)
        .map(|(&(_, i), w)| anchors[i].0.ridge * w)
        .sum();
    Ok(map)
}
