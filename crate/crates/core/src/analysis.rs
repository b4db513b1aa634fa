//! Per-token error metrics, rank correlation and layerwise aggregation.

use alloc::vec::Vec;

// Float math comes from the trait on targets without inherent float methods.
use crate::error::{Error, Result};
use crate::fit::MapClass;
use crate::geometry::GeometryRecord;
use crate::linalg::{norm, sub, ZERO_NORM};
#[allow(unused_imports)]
use num_traits::Float;

/// `‖pred − target‖ / ‖target‖`; `None` when the target is numerically zero.
pub fn rel_err(pred: &[f64], target: &[f64]) -> Option<f64> {
    let t = norm(target);
    if t < ZERO_NORM || pred.len() != target.len() {
        return None;
    }
    Some(norm(&sub(pred, target)) / t)
}

/// Average ranks (1-based), ties sharing the mean of their rank span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = alloc::vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's ρ: Pearson correlation of average ranks. `None` for fewer than
/// three points, unequal lengths, NaN input, or a constant series. Infinite
/// values rank above every finite one.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 3 || x.iter().chain(y).any(|v| v.is_nan()) {
        return None;
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Outcome of intervening on one token.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub layer: u32,
    pub seq_id: u32,
    pub pos: u32,
    pub class: MapClass,
    /// `None` when the target state is numerically zero.
    pub rel_err: Option<f64>,
    /// Nats; `f64::INFINITY` when the perturbed distribution loses support.
    pub kl: f64,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Statistics of one group of records.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeRow {
    pub count: usize,
    pub mean_rel_err: Option<f64>,
    /// Mean over finite KL values.
    pub mean_kl: Option<f64>,
    pub spearman: Option<f64>,
    pub infinite_kl: usize,
}

impl RegimeRow {
    pub fn of(records: &[&EvalRecord]) -> RegimeRow {
        let defined: Vec<&&EvalRecord> = records.iter().filter(|r| r.rel_err.is_some()).collect();
        let errs: Vec<f64> = defined.iter().map(|r| r.rel_err.unwrap_or_default()).collect();
        let kls: Vec<f64> = defined.iter().map(|r| r.kl).collect();
        RegimeRow {
            count: defined.len(),
            mean_rel_err: mean(errs.iter().copied()),
            mean_kl: mean(kls.iter().copied().filter(|k| k.is_finite())),
            spearman: spearman(&errs, &kls),
            infinite_kl: kls.iter().filter(|k| k.is_infinite()).count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Low,
    Mid,
    High,
}

/// RelErr tercile bins for one map class.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeTable {
    pub class: MapClass,
    /// `Low: e ≤ lower`, `Mid: lower < e ≤ upper`, `High: e > upper`.
    pub lower: f64,
    pub upper: f64,
    pub low: RegimeRow,
    pub mid: RegimeRow,
    pub high: RegimeRow,
    pub overall: RegimeRow,
}

impl RegimeTable {
    pub fn regime_of(&self, rel_err: f64) -> Regime {
        if rel_err <= self.lower {
            Regime::Low
        } else if rel_err <= self.upper {
            Regime::Mid
        } else {
            Regime::High
        }
    }
}

/// Partitions records by RelErr terciles (nearest-rank thresholds) and
/// summarizes each bin plus the pooled set. Records without a defined RelErr
/// are ignored.
pub fn bin_regimes(records: &[EvalRecord]) -> Result<RegimeTable> {
    let defined: Vec<&EvalRecord> = records.iter().filter(|r| r.rel_err.is_some()).collect();
    if defined.len() < 3 {
        return Err(Error::TooMany {
            requested: 3,
            available: defined.len(),
        });
    }
    let class = defined[0].class;
    let mut errs: Vec<f64> = defined.iter().filter_map(|r| r.rel_err).collect();
    errs.sort_by(f64::total_cmp);
    let n = errs.len();
    let lower = errs[n.div_ceil(3) - 1];
    let upper = errs[(2 * n).div_ceil(3) - 1];

    let mut bins: [Vec<&EvalRecord>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for r in &defined {
        let e = r.rel_err.unwrap_or_default();
        let slot = if e <= lower {
            0
        } else if e <= upper {
            1
        } else {
            2
        };
        bins[slot].push(r);
    }
    Ok(RegimeTable {
        class,
        lower,
        upper,
        low: RegimeRow::of(&bins[0]),
        mid: RegimeRow::of(&bins[1]),
        high: RegimeRow::of(&bins[2]),
        overall: RegimeRow::of(&defined),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMeans {
    pub k: usize,
    pub full: Option<f64>,
    pub tok: Option<f64>,
    pub res: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStats {
    pub mean_norm: Option<f64>,
    pub median_norm: Option<f64>,
    pub max_norm: Option<f64>,
    /// Mean of `‖r‖ / ‖Δ_full‖` over tokens with a nonzero update.
    pub mean_ratio_to_update: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSummary {
    pub layer: u32,
    pub spearman_rho: Option<f64>,
    pub mean_rel_err: Option<f64>,
    pub median_rel_err: Option<f64>,
    pub mean_kl: Option<f64>,
    pub records: usize,
    pub degenerate_rel_err: usize,
    pub infinite_kl: usize,
    pub residual: ResidualStats,
    pub mean_align_full_tok: Option<f64>,
    pub mean_align_res_tok: Option<f64>,
    pub mean_signed_full_tok: Option<f64>,
    pub mean_signed_res_tok: Option<f64>,
    pub mean_angle_full_tok: Option<f64>,
    pub mean_angle_res_tok: Option<f64>,
    pub projections: Vec<ProjectionMeans>,
    pub geometry_records: usize,
    pub undefined_full_tok: usize,
    pub undefined_res_tok: usize,
}

/// Aggregates one layer's evaluation and geometry records.
pub fn summarize_layer(records: &[EvalRecord], geometry: &[GeometryRecord], layer: u32) -> LayerSummary {
    let errs: Vec<f64> = records.iter().filter_map(|r| r.rel_err).collect();
    let paired_kl: Vec<f64> = records.iter().filter(|r| r.rel_err.is_some()).map(|r| r.kl).collect();

    let full: Vec<_> = geometry.iter().filter_map(|g| g.full_tok).collect();
    let res: Vec<_> = geometry.iter().filter_map(|g| g.res_tok).collect();
    let mut norms: Vec<f64> = geometry.iter().map(|g| g.residual_norm).collect();

    let ks: Vec<usize> = geometry
        .first()
        .map(|g| g.projections.iter().map(|p| p.k).collect())
        .unwrap_or_default();
    let projections = ks
        .iter()
        .enumerate()
        .map(|(j, &k)| ProjectionMeans {
            k,
            full: mean(
                geometry
                    .iter()
                    .filter_map(|g| g.projections.get(j).and_then(|p| p.full)),
            ),
            tok: mean(geometry.iter().filter_map(|g| g.projections.get(j).and_then(|p| p.tok))),
            res: mean(geometry.iter().filter_map(|g| g.projections.get(j).and_then(|p| p.res))),
        })
        .collect();

    LayerSummary {
        layer,
        spearman_rho: spearman(&errs, &paired_kl),
        mean_rel_err: mean(errs.iter().copied()),
        median_rel_err: median(&mut errs.clone()),
        mean_kl: mean(records.iter().map(|r| r.kl).filter(|k| k.is_finite())),
        records: records.len(),
        degenerate_rel_err: records.len() - errs.len(),
        infinite_kl: records.iter().filter(|r| r.kl.is_infinite()).count(),
        residual: ResidualStats {
            mean_norm: mean(norms.iter().copied()),
            max_norm: norms.iter().copied().reduce(f64::max),
            median_norm: median(&mut norms),
            mean_ratio_to_update: mean(
                geometry
                    .iter()
                    .filter(|g| g.full_norm >= ZERO_NORM)
                    .map(|g| g.residual_norm / g.full_norm),
            ),
        },
        mean_align_full_tok: mean(full.iter().map(|a| a.abs_cos)),
        mean_align_res_tok: mean(res.iter().map(|a| a.abs_cos)),
        mean_signed_full_tok: mean(full.iter().map(|a| a.signed_cos)),
        mean_signed_res_tok: mean(res.iter().map(|a| a.signed_cos)),
        mean_angle_full_tok: mean(full.iter().map(|a| a.angle_deg)),
        mean_angle_res_tok: mean(res.iter().map(|a| a.angle_deg)),
        projections,
        geometry_records: geometry.len(),
        undefined_full_tok: geometry.len() - full.len(),
        undefined_res_tok: geometry.len() - res.len(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSummary {
    pub mean_rho: f64,
    pub layers_used: usize,
    pub layers_excluded: usize,
}

/// Unweighted mean of the defined per-layer Spearman values.
pub fn model_summary(layers: &[LayerSummary]) -> Result<ModelSummary> {
    let rhos: Vec<f64> = layers.iter().filter_map(|l| l.spearman_rho).collect();
    if rhos.is_empty() {
        return Err(Error::Empty("defined per-layer Spearman values"));
    }
    Ok(ModelSummary {
        mean_rho: rhos.iter().sum::<f64>() / rhos.len() as f64,
        layers_used: rhos.len(),
        layers_excluded: layers.len() - rhos.len(),
    })
}
