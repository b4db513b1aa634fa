//! Run configuration: one JSON document, every field overridable with
//! `--key=value` (nested fields as `--toy.train_sequences=100`).

use std::path::{Path, PathBuf};

use layerlens_core::fit::{Activation, FitConfig, MapClass, MlpConfig, Ridge};
use layerlens_core::intervene::InterventionMode;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LensError, Result};

/// How the bundled toy model and its dump are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    /// Checkpoint file; `None` uses the bundled trained model.
    pub checkpoint: Option<PathBuf>,
    /// Use randomly initialized weights from this seed instead of a checkpoint.
    pub random_seed: Option<u64>,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub seq_len: usize,
    /// Sampled positions per sequence.
    pub positions: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            checkpoint: None,
            random_seed: None,
            train_sequences: 256,
            test_sequences: 64,
            seq_len: 64,
            positions: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassName {
    Lowrank,
    DiagPsd,
    GlobalDiag,
    Orthogonal,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    AllPositions,
    SampledPositions,
}

impl ModeName {
    pub fn mode(self) -> InterventionMode {
        match self {
            ModeName::AllPositions => InterventionMode::AllPositions,
            ModeName::SampledPositions => InterventionMode::SampledPositions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationName {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSpec {
    pub hidden: Option<usize>,
    pub activation: ActivationName,
    pub steps: usize,
    pub step_size: f64,
    pub seed: u64,
    /// Use the output-layer SVD for subspace projections of MLP maps.
    pub heuristic_projection: bool,
}

impl Default for MlpSpec {
    fn default() -> Self {
        let d = MlpConfig::default();
        MlpSpec {
            hidden: d.hidden,
            activation: ActivationName::Tanh,
            steps: d.steps,
            step_size: d.step_size,
            seed: d.seed,
            heuristic_projection: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Rank,
    K,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub values: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Existing dump directory; without one the toy model is used.
    pub dump: Option<PathBuf>,
    pub toy: ToySpec,
    /// Layer transitions to evaluate; `None` means all in the dump.
    pub layers: Option<Vec<u32>>,
    pub classes: Vec<ClassName>,
    /// Ranks for the low-rank class; ranks above the hidden size are skipped.
    pub ranks: Vec<usize>,
    pub k: usize,
    /// Relative ridge scale: `ridge · trace(XᵀX) / d`.
    pub ridge: f64,
    /// Number of train anchors whose maps are blended per token; `None` fits
    /// every token on its own neighborhood.
    pub anchors: Option<usize>,
    /// Anchors blended per token when `anchors` is set.
    pub interpolate: usize,
    /// Projection ranks.
    pub ks: Vec<usize>,
    pub mode: ModeName,
    pub endpoint: Option<String>,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
    /// Sampled positions per sequence when the dump holds full sequences.
    pub positions: usize,
    pub mlp: MlpSpec,
    pub save_maps: bool,
    pub seed: u64,
    pub out: PathBuf,
    pub sweep: Option<SweepSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dump: None,
            toy: ToySpec::default(),
            layers: None,
            classes: vec![ClassName::Lowrank],
            ranks: vec![4, 8, 16, 32, 64],
            k: 64,
            ridge: 1e-6,
            anchors: None,
            interpolate: 4,
            ks: vec![1, 4, 8],
            mode: ModeName::AllPositions,
            endpoint: None,
            max_in_flight: 4,
            timeout_secs: 30,
            positions: 8,
            mlp: MlpSpec::default(),
            save_maps: false,
            seed: 0,
            out: PathBuf::from("layerlens-out"),
            sweep: None,
        }
    }
}

/// One fitted map family evaluated by a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResultSetSpec {
    pub class: MapClass,
    pub fit: FitConfig,
}

impl ResultSetSpec {
    pub fn tag(&self) -> String {
        self.class.tag()
    }
}

impl RunConfig {
    /// Loads `path` (or the defaults) and applies `--key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut doc = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| LensError::io(p, e))?;
                serde_json::from_str::<Value>(&text).map_err(|e| LensError::Config(format!("{}: {e}", p.display())))?
            }
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| LensError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LensError::Config(msg));
        if self.classes.is_empty() {
            return bad("classes must name at least one map class".into());
        }
        if self.classes.contains(&ClassName::Lowrank) && self.ranks.is_empty() {
            return bad("the lowrank class needs at least one entry in ranks".into());
        }
        if self.ranks.contains(&0) {
            return bad("ranks must be at least 1".into());
        }
        if self.k == 0 {
            return bad("k must be at least 1".into());
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return bad(format!("ridge must be finite and nonnegative, got {}", self.ridge));
        }
        if self.anchors == Some(0) {
            return bad("anchors must be at least 1 when set".into());
        }
        if self.interpolate == 0 {
            return bad("interpolate must be at least 1".into());
        }
        if self.ks.contains(&0) {
            return bad("projection ks must be at least 1".into());
        }
        if self.max_in_flight == 0 {
            return bad("max_in_flight must be at least 1".into());
        }
        if self.positions == 0 {
            return bad("positions must be at least 1".into());
        }
        if !(self.mlp.step_size.is_finite() && self.mlp.step_size > 0.0) {
            return bad("mlp.step_size must be positive".into());
        }
        if self.mlp.hidden == Some(0) {
            return bad("mlp.hidden must be at least 1 when set".into());
        }
        let t = &self.toy;
        if t.seq_len == 0 || t.positions == 0 || t.positions > t.seq_len {
            return bad(format!(
                "toy.positions ({}) must be in 1..=toy.seq_len ({})",
                t.positions, t.seq_len
            ));
        }
        if t.checkpoint.is_some() && t.random_seed.is_some() {
            return bad("set at most one of toy.checkpoint and toy.random_seed".into());
        }
        if let Some(e) = &self.endpoint {
            if !(e.starts_with("http://") || e.starts_with("https://")) {
                return bad(format!("endpoint {e:?} must start with http:// or https://"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return bad("sweep.values must not be empty".into());
            }
            if s.values.contains(&0) {
                return bad("sweep values must be at least 1".into());
            }
        }
        if self.out.as_os_str().is_empty() {
            return bad("out must name a directory".into());
        }
        Ok(())
    }

    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            hidden: self.mlp.hidden,
            activation: match self.mlp.activation {
                ActivationName::Tanh => Activation::Tanh,
                ActivationName::Relu => Activation::Relu,
            },
            steps: self.mlp.steps,
            step_size: self.mlp.step_size,
            seed: self.mlp.seed,
        }
    }

    /// Result sets for hidden size `dim`, plus warnings for skipped ranks.
    pub fn result_sets(&self, dim: usize) -> (Vec<ResultSetSpec>, Vec<String>) {
        let mut sets = Vec::new();
        let mut warnings = Vec::new();
        let base = FitConfig {
            class: MapClass::LocalDiagPsd,
            k: self.k,
            ridge: Ridge::Relative(self.ridge),
            mlp: self.mlp_config(),
        };
        for &c in &self.classes {
            let classes: Vec<MapClass> = match c {
                ClassName::Lowrank => self
                    .ranks
                    .iter()
                    .filter(|&&r| {
                        let ok = r <= dim;
                        if !ok {
                            warnings.push(format!("rank {r} exceeds hidden size {dim}; skipped"));
                        }
                        ok
                    })
                    .map(|&rank| MapClass::LocalLowRank { rank })
                    .collect(),
                ClassName::DiagPsd => vec![MapClass::LocalDiagPsd],
                ClassName::GlobalDiag => vec![MapClass::GlobalDiagPsd],
                ClassName::Orthogonal => vec![MapClass::Orthogonal],
                ClassName::Mlp => vec![MapClass::Mlp],
            };
            for class in classes {
                if !sets.iter().any(|s: &ResultSetSpec| s.class == class) {
                    sets.push(ResultSetSpec {
                        class,
                        fit: FitConfig { class, ..base },
                    });
                }
            }
        }
        (sets, warnings)
    }
}

/// Parses a `--key=value` override into `doc`. Values are read as JSON when
/// possible, comma-separated lists become arrays, anything else is a string.
pub fn apply_override(doc: &mut Value, arg: &str) -> Result<()> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| LensError::Config(format!("override {arg:?} must look like --key=value")))?;
    let (key, raw) = body
        .split_once('=')
        .ok_or_else(|| LensError::Config(format!("override {arg:?} is missing '=value'")))?;
    if key.is_empty() {
        return Err(LensError::Config(format!("override {arg:?} has an empty key")));
    }
    let defaults = serde_json::to_value(RunConfig::default()).expect("config serializes");
    let path: Vec<&str> = key.split('.').collect();
    let mut expected = Some(&defaults);
    for part in &path {
        expected = expected.and_then(|v| v.get(part));
    }
    if expected.is_none() && !is_optional_object(&path) {
        return Err(LensError::Config(format!("unknown config key {key:?}")));
    }
    let want_array = matches!(expected, Some(Value::Array(_))) || key == "layers" || key == "sweep.values";
    let mut value = parse_value(raw);
    if want_array && !value.is_array() {
        value = match &value {
            Value::String(s) if s.contains(',') => Value::Array(s.split(',').map(|p| parse_value(p.trim())).collect()),
            Value::Null => Value::Null,
            _ => Value::Array(vec![value]),
        };
    }
    let mut slot = doc;
    for (i, part) in path.iter().enumerate() {
        if !slot.is_object() {
            *slot = Value::Object(Default::default());
        }
        let obj = slot.as_object_mut().expect("object");
        if i + 1 == path.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        slot = obj
            .entry((*part).to_string())
            .or_insert(Value::Object(Default::default()));
    }
    Ok(())
}

/// Keys under optional sections that are absent from the defaults.
fn is_optional_object(path: &[&str]) -> bool {
    matches!(path, ["sweep", "kind" | "values"])
}

fn parse_value(raw: &str) -> Value {
    if raw.contains(',') && !raw.trim_start().starts_with('[') && !raw.trim_start().starts_with('{') {
        return Value::String(raw.to_string());
    }
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}
