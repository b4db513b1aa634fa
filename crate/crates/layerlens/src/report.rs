//! JSON report documents and the per-layer records CSV.

use std::collections::BTreeMap;
use std::fmt::Write;

use layerlens_core::analysis::{EvalRecord, LayerSummary, ModelSummary, RegimeRow, RegimeTable};
use layerlens_core::geometry::GeometryRecord;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionJson {
    pub k: usize,
    pub full: Option<f64>,
    pub tok: Option<f64>,
    pub res: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualJson {
    pub mean_norm: Option<f64>,
    pub median_norm: Option<f64>,
    pub max_norm: Option<f64>,
    pub mean_ratio_to_update: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    pub layer: u32,
    pub spearman_rho: Option<f64>,
    pub mean_rel_err: Option<f64>,
    pub median_rel_err: Option<f64>,
    pub mean_kl: Option<f64>,
    pub records: usize,
    pub degenerate_rel_err: usize,
    pub infinite_kl: usize,
    pub residual: ResidualJson,
    pub mean_align_full_tok: Option<f64>,
    pub mean_align_res_tok: Option<f64>,
    pub mean_signed_full_tok: Option<f64>,
    pub mean_signed_res_tok: Option<f64>,
    pub mean_angle_full_tok: Option<f64>,
    pub mean_angle_res_tok: Option<f64>,
    pub projections: Vec<ProjectionJson>,
    pub geometry_records: usize,
    pub undefined_full_tok: usize,
    pub undefined_res_tok: usize,
}

impl From<&LayerSummary> for SummaryJson {
    fn from(s: &LayerSummary) -> Self {
        SummaryJson {
            layer: s.layer,
            spearman_rho: s.spearman_rho,
            mean_rel_err: s.mean_rel_err,
            median_rel_err: s.median_rel_err,
            mean_kl: s.mean_kl,
            records: s.records,
            degenerate_rel_err: s.degenerate_rel_err,
            infinite_kl: s.infinite_kl,
            residual: ResidualJson {
                mean_norm: s.residual.mean_norm,
                median_norm: s.residual.median_norm,
                max_norm: s.residual.max_norm,
                mean_ratio_to_update: s.residual.mean_ratio_to_update,
            },
            mean_align_full_tok: s.mean_align_full_tok,
            mean_align_res_tok: s.mean_align_res_tok,
            mean_signed_full_tok: s.mean_signed_full_tok,
            mean_signed_res_tok: s.mean_signed_res_tok,
            mean_angle_full_tok: s.mean_angle_full_tok,
            mean_angle_res_tok: s.mean_angle_res_tok,
            projections: s
                .projections
                .iter()
                .map(|p| ProjectionJson {
                    k: p.k,
                    full: p.full,
                    tok: p.tok,
                    res: p.res,
                })
                .collect(),
            geometry_records: s.geometry_records,
            undefined_full_tok: s.undefined_full_tok,
            undefined_res_tok: s.undefined_res_tok,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeRowJson {
    pub count: usize,
    /// Explicit marker for a bin that received no tokens.
    pub empty: bool,
    pub mean_rel_err: Option<f64>,
    pub mean_kl: Option<f64>,
    pub spearman: Option<f64>,
    pub infinite_kl: usize,
}

impl From<&RegimeRow> for RegimeRowJson {
    fn from(r: &RegimeRow) -> Self {
        RegimeRowJson {
            count: r.count,
            empty: r.count == 0,
            mean_rel_err: r.mean_rel_err,
            mean_kl: r.mean_kl,
            spearman: r.spearman,
            infinite_kl: r.infinite_kl,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeJson {
    pub class: String,
    /// How the thresholds were derived.
    pub rule: String,
    pub lower: f64,
    pub upper: f64,
    pub low: RegimeRowJson,
    pub mid: RegimeRowJson,
    pub high: RegimeRowJson,
    pub overall: RegimeRowJson,
}

pub const TERCILE_RULE: &str =
    "nearest-rank RelErr terciles over the evaluated tokens; Low: e <= lower, Mid: lower < e <= upper, High: e > upper";

impl From<&RegimeTable> for RegimeJson {
    fn from(t: &RegimeTable) -> Self {
        RegimeJson {
            class: t.class.to_string(),
            rule: TERCILE_RULE.into(),
            lower: t.lower,
            upper: t.upper,
            low: (&t.low).into(),
            mid: (&t.mid).into(),
            high: (&t.high).into(),
            overall: (&t.overall).into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlAggregate {
    /// Mean over finite values.
    pub mean: Option<f64>,
    pub count: usize,
    pub infinite: usize,
}

impl KlAggregate {
    pub fn of(records: &[EvalRecord]) -> Self {
        let finite: Vec<f64> = records.iter().map(|r| r.kl).filter(|k| k.is_finite()).collect();
        KlAggregate {
            mean: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
            count: records.len(),
            infinite: records.len() - finite.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainJson {
    /// In-sample statistics: each train token is evaluated on the map fitted
    /// over its own neighborhood.
    pub summary: SummaryJson,
    pub mean_rel_err: Option<f64>,
    pub median_rel_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerJson {
    pub layer: u32,
    /// Test split, sampled positions.
    pub test: SummaryJson,
    /// KL at the sampled positions and at every position of each sequence.
    pub kl_sampled_positions: KlAggregate,
    pub kl_all_positions: KlAggregate,
    pub regimes: Option<RegimeJson>,
    pub train: TrainJson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelJson {
    pub mean_rho: f64,
    pub layers_used: usize,
    pub layers_excluded: usize,
}

impl From<&ModelSummary> for ModelJson {
    fn from(m: &ModelSummary) -> Self {
        ModelJson {
            mean_rho: m.mean_rho,
            layers_used: m.layers_used,
            layers_excluded: m.layers_excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetJson {
    pub tag: String,
    pub class: String,
    pub rank: Option<usize>,
    pub mode: String,
    pub k: usize,
    pub layers: Vec<LayerJson>,
    pub model: Option<ModelJson>,
    /// Regime table over the tokens of all evaluated layers.
    pub regimes_pooled: Option<RegimeJson>,
    /// Median in-sample train RelErr over all evaluated layers.
    pub median_train_rel_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceJson {
    pub dump: Option<String>,
    pub model_name: String,
    pub num_layers: u32,
    pub hidden_dim: u32,
    pub seq_len: u32,
    pub backend: String,
    pub train_pairs: BTreeMap<u32, usize>,
    pub test_pairs: BTreeMap<u32, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub source: SourceJson,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
    pub sets: Vec<SetJson>,
    /// Reserved for confidence intervals; not computed.
    pub bootstrap: Option<serde_json::Value>,
}

fn num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_infinite() => "inf".into(),
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// `records_<ℓ>.csv` contents: one row per record, joined with the geometry
/// record of the same token.
pub fn records_csv(records: &[EvalRecord], geometry: &[GeometryRecord], ks: &[usize]) -> String {
    let mut out = String::from("seq_id,pos,rel_err,kl,align_full_tok,align_res_tok,angle_full_tok,angle_res_tok");
    for k in ks {
        let _ = write!(out, ",proj_full_{k},proj_tok_{k},proj_res_{k}");
    }
    out.push('\n');
    let by_token: BTreeMap<(u32, u32), &GeometryRecord> = geometry.iter().map(|g| ((g.seq_id, g.pos), g)).collect();
    for r in records {
        let g = by_token.get(&(r.seq_id, r.pos));
        let full = g.and_then(|g| g.full_tok);
        let res = g.and_then(|g| g.res_tok);
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.seq_id,
            r.pos,
            num(r.rel_err),
            num(Some(r.kl)),
            num(full.map(|a| a.abs_cos)),
            num(res.map(|a| a.abs_cos)),
            num(full.map(|a| a.angle_deg)),
            num(res.map(|a| a.angle_deg)),
        );
        for &k in ks {
            let p = g.and_then(|g| g.projections.iter().find(|p| p.k == k));
            let _ = write!(
                out,
                ",{},{},{}",
                num(p.and_then(|p| p.full)),
                num(p.and_then(|p| p.tok)),
                num(p.and_then(|p| p.res))
            );
        }
        out.push('\n');
    }
    out
}
