//! End-to-end pipeline: ingest or generate a dump, fit maps, measure geometry,
//! intervene, aggregate and write reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use layerlens_core::analysis::{bin_regimes, model_summary, rel_err, summarize_layer, EvalRecord, LayerSummary};
use layerlens_core::fit::{fit_anchor, fit_global_diag, fit_local, interpolate_maps, MapClass, TokenwiseMap};
use layerlens_core::geometry::{geometry_batch, geometry_record, make_triple, GeometryRecord};
use layerlens_core::intervene::{intervene_sequence, ResumeBackend, SequenceCase, ToyBackend};
use layerlens_core::linalg::{dot, norm, to_f64};
use layerlens_core::neighborhood::{build_index, select_anchors, NeighborIndex};
use layerlens_core::repr::{derive_seed, sample_positions, LayerDataset, ReprPair, Split};
use layerlens_core::toy::{extract_pairs, ToyModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::client::{ClientOptions, ResumeClient};
use crate::config::{ResultSetSpec, RunConfig, SweepKind};
use crate::corpus;
use crate::error::{LensError, Result, Stage};
use crate::mapfile::{self, KeyedMap};
use crate::plot::{self, Chart, Scale, Series};
use crate::report::{
    records_csv, KlAggregate, LayerJson, ModelJson, RegimeJson, Report, SetJson, SourceJson, SummaryJson, TrainJson,
};
use crate::store::{self, DumpManifest, ToyArtifacts};

pub const THREADS_ENV: &str = "LAYERLENS_THREADS";
pub const RUN_FILE: &str = "run.json";
pub const REPORT_FILE: &str = "report.json";
pub const SWEEP_FILE: &str = "sweep.json";
const TOY_CHECKPOINT: &str = "toy_checkpoint.ltw";
const TOY_TOKENS: &str = "toy_tokens.json";
const TOY_MODEL_NAME: &str = "toy-byte-decoder";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub seq_id: u32,
    pub split: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFile {
    pub sequences: Vec<TokenSeq>,
}

/// Toy model plus the token ids of every dumped sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySource {
    pub model: ToyModel,
    pub sequences: Vec<TokenSeq>,
}

/// A validated dump ready for analysis.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub dir: Option<PathBuf>,
    pub manifest: DumpManifest,
    pub datasets: Vec<LayerDataset>,
    pub toy: Option<ToySource>,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| LensError::io(path, e))
}

/// Runs `f` on a fresh staging directory and moves it to `out` on success.
/// On failure the staging directory is removed and `out` is left untouched.
/// An existing `out` is replaced only if it is empty or holds one of
/// `markers`.
fn staged<T>(out: &Path, markers: &[&str], f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    if out.exists() {
        if !out.is_dir() {
            return Err(LensError::Config(format!(
                "output path {} is not a directory",
                out.display()
            )));
        }
        let mut entries = fs::read_dir(out).map_err(|e| LensError::io(out, e))?;
        let empty = entries.next().is_none();
        if !empty && !markers.iter().any(|m| out.join(m).exists()) {
            return Err(LensError::Config(format!(
                "refusing to overwrite {}: it is not empty and holds no earlier output",
                out.display()
            )));
        }
    }
    let name = out
        .file_name()
        .ok_or_else(|| LensError::Config(format!("output path {} has no final component", out.display())))?;
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| LensError::io(parent, e))?;
    let staging = parent.join(format!(".{}.staging-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| LensError::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| LensError::io(&staging, e))?;
    match f(&staging) {
        Ok(v) => {
            if out.exists() {
                fs::remove_dir_all(out).map_err(|e| LensError::io(out, e))?;
            }
            fs::rename(&staging, out).map_err(|e| LensError::io(out, e))?;
            Ok(v)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| LensError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| LensError::Config(format!("cannot start worker pool: {e}")))
}

pub fn load_toy_model(cfg: &RunConfig) -> Result<ToyModel> {
    let t = &cfg.toy;
    match (&t.checkpoint, t.random_seed) {
        (Some(path), _) => checkpoint::load(path),
        (None, Some(seed)) => ToyModel::random(Default::default(), seed).stage("toy model"),
        (None, None) => checkpoint::bundled(),
    }
}

/// Generates the toy dump in memory.
pub fn build_toy_dump(cfg: &RunConfig) -> Result<Ingested> {
    let t = &cfg.toy;
    let total = t.train_sequences + t.test_sequences;
    if total == 0 {
        return Err(LensError::Config("empty run: no sequences requested".into()));
    }
    let model = load_toy_model(cfg)?;
    let mc = *model.config();
    if t.seq_len > mc.max_seq_len {
        return Err(LensError::Config(format!(
            "toy.seq_len {} exceeds the model's {} positions",
            t.seq_len, mc.max_seq_len
        )));
    }
    let windows = corpus::windows(&corpus::tokens(), t.seq_len, total, cfg.seed)?;
    let sequences: Vec<TokenSeq> = windows
        .into_iter()
        .enumerate()
        .map(|(i, tokens)| TokenSeq {
            seq_id: i as u32,
            split: if i < t.train_sequences {
                Split::Train
            } else {
                Split::Test
            }
            .to_string(),
            tokens,
        })
        .collect();
    let all_valid = vec![true; t.seq_len];
    let mut per_split: Vec<(Split, Vec<LayerDataset>)> = Vec::new();
    for split in [Split::Train, Split::Test] {
        let chosen: Vec<&TokenSeq> = sequences.iter().filter(|s| s.split == split.as_str()).collect();
        if chosen.is_empty() {
            continue;
        }
        let seqs: Vec<(u32, Vec<u32>)> = chosen.iter().map(|s| (s.seq_id, s.tokens.clone())).collect();
        let positions = chosen
            .iter()
            .map(|s| {
                sample_positions(
                    t.seq_len,
                    &all_valid,
                    t.positions,
                    derive_seed(cfg.seed, u64::from(s.seq_id)),
                )
                .map(|p| p.into_iter().map(|x| x as usize).collect())
            })
            .collect::<layerlens_core::Result<Vec<Vec<usize>>>>()
            .stage("position sampling")?;
        per_split.push((
            split,
            extract_pairs(&model, &seqs, &positions, split).stage("toy forward")?,
        ));
    }
    let mut datasets = Vec::new();
    for layer in 0..mc.num_layers {
        for (_, sets) in &per_split {
            datasets.push(sets[layer].clone());
        }
    }
    let mut manifest = DumpManifest::describe(
        TOY_MODEL_NAME,
        mc.num_layers as u32,
        t.seq_len as u32,
        cfg.seed,
        &datasets,
    );
    manifest.toy = Some(ToyArtifacts {
        checkpoint: TOY_CHECKPOINT.into(),
        tokens: TOY_TOKENS.into(),
    });
    Ok(Ingested {
        dir: None,
        manifest,
        datasets,
        toy: Some(ToySource { model, sequences }),
    })
}

fn write_toy_dump(dump: &Ingested, dir: &Path) -> Result<()> {
    store::write_dump(&dump.manifest, &dump.datasets, dir)?;
    let toy = dump.toy.as_ref().expect("toy dump");
    checkpoint::save(&toy.model, &dir.join(TOY_CHECKPOINT))?;
    let file = TokenFile {
        sequences: toy.sequences.clone(),
    };
    let mut json = serde_json::to_vec(&file).expect("tokens serialize");
    json.push(b'\n');
    write(&dir.join(TOY_TOKENS), json)
}

/// `toygen`: writes a dump of the toy model's hidden states to `cfg.out`.
pub fn cmd_toygen(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let dump = build_toy_dump(cfg)?;
    staged(&cfg.out, &[store::MANIFEST], |dir| write_toy_dump(&dump, dir))?;
    Ok(cfg.out.clone())
}

fn inside(dir: &Path, rel: &str, what: &str) -> Result<PathBuf> {
    if Path::new(rel).is_absolute() || rel.contains("..") {
        return Err(LensError::format(
            dir.join(store::MANIFEST),
            format!("{what} path {rel:?} must stay inside the dump"),
        ));
    }
    Ok(dir.join(rel))
}

/// Reads the configured dump, or builds the toy dump when none is given.
pub fn ingest(cfg: &RunConfig) -> Result<Ingested> {
    let Some(dir) = &cfg.dump else {
        return build_toy_dump(cfg);
    };
    let (manifest, datasets) = store::read_dump(dir)?;
    let toy = match &manifest.toy {
        None => None,
        Some(art) => {
            let model = checkpoint::load(&inside(dir, &art.checkpoint, "checkpoint")?)?;
            let tpath = inside(dir, &art.tokens, "tokens")?;
            let text = fs::read(&tpath).map_err(|e| LensError::io(&tpath, e))?;
            let file: TokenFile =
                serde_json::from_slice(&text).map_err(|e| LensError::format(&tpath, e.to_string()))?;
            let mc = model.config();
            if mc.dim != manifest.hidden_dim as usize || mc.num_layers != manifest.num_layers as usize {
                return Err(LensError::format(
                    &tpath,
                    "toy checkpoint shape disagrees with the manifest",
                ));
            }
            Some(ToySource {
                model,
                sequences: file.sequences,
            })
        }
    };
    Ok(Ingested {
        dir: Some(dir.clone()),
        manifest,
        datasets,
        toy,
    })
}

enum Backend<'a> {
    Toy(ToyBackend<'a>),
    Remote(ResumeClient),
}

impl Backend<'_> {
    fn get(&self) -> &(dyn ResumeBackend + Sync) {
        match self {
            Backend::Toy(b) => b,
            Backend::Remote(c) => c,
        }
    }
}

/// Connects to the configured resume service; fails fast when unreachable.
pub fn connect(cfg: &RunConfig) -> Result<Option<ResumeClient>> {
    let Some(endpoint) = &cfg.endpoint else {
        return Ok(None);
    };
    let opts = ClientOptions {
        timeout: std::time::Duration::from_secs(cfg.timeout_secs),
        max_in_flight: cfg.max_in_flight,
        ..ClientOptions::default()
    };
    Ok(Some(ResumeClient::connect(endpoint, opts)?))
}

/// Supplies the map assigned to a token from its `h_ℓ`.
enum Provider<'a> {
    Local {
        train: &'a LayerDataset,
        index: &'a NeighborIndex,
        spec: ResultSetSpec,
    },
    Anchored {
        anchors: Vec<(TokenwiseMap, Vec<f64>)>,
        p: usize,
    },
    Global(TokenwiseMap),
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let n = norm(a) * norm(b);
    if n == 0.0 {
        f64::INFINITY
    } else {
        1.0 - dot(a, b) / n
    }
}

impl Provider<'_> {
    fn map_for(&self, h: &[f64]) -> layerlens_core::Result<TokenwiseMap> {
        match self {
            Provider::Local { train, index, spec } => fit_local(train, index, h, &spec.fit),
            Provider::Anchored { anchors, p } => {
                if anchors[0].0.class.is_linear() {
                    interpolate_maps(anchors, h, *p)
                } else {
                    let best = anchors
                        .iter()
                        .enumerate()
                        .min_by(|a, b| {
                            cosine_distance(h, &a.1 .1)
                                .total_cmp(&cosine_distance(h, &b.1 .1))
                                .then(a.0.cmp(&b.0))
                        })
                        .expect("anchors nonempty");
                    Ok(best.1 .0.clone())
                }
            }
            Provider::Global(m) => Ok(m.clone()),
        }
    }

    /// Maps for the train split, each token on its own neighborhood.
    fn train_maps(&self, train: &LayerDataset) -> layerlens_core::Result<Vec<TokenwiseMap>> {
        match self {
            Provider::Local { index, spec, .. } => (0..train.len())
                .into_par_iter()
                .map(|i| fit_anchor(train, index, i, &spec.fit))
                .collect(),
            _ => train
                .pairs()
                .par_iter()
                .map(|p| self.map_for(&to_f64(&p.h_in)))
                .collect(),
        }
    }
}

/// Measurements of one result set at one layer.
#[derive(Debug, Clone)]
pub struct LayerOutcome {
    pub layer: u32,
    /// Records at the sampled test positions.
    pub records: Vec<EvalRecord>,
    /// Records at every position of each test sequence.
    pub records_all: Vec<EvalRecord>,
    /// Geometry at the sampled test positions, ordered by `(seq_id, pos)`.
    pub geometry: Vec<GeometryRecord>,
    /// In-sample geometry of the train split.
    pub train_geometry: Vec<GeometryRecord>,
    /// In-sample RelErr per train pair (`None` when degenerate).
    pub train_rel_err: Vec<Option<f64>>,
    pub summary: LayerSummary,
}

#[derive(Debug, Clone)]
pub struct SetOutcome {
    pub spec: ResultSetSpec,
    pub layers: Vec<LayerOutcome>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: Report,
    pub sets: Vec<SetOutcome>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn median(mut values: Vec<f64>) -> Option<f64> {
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

struct TestSequence {
    case: SequenceCase,
}

/// Intervention inputs for every test sequence of `layer`.
fn test_cases(cfg: &RunConfig, layer: u32, test: &LayerDataset, backend: &Backend<'_>) -> Result<Vec<TestSequence>> {
    let mut by_seq: BTreeMap<u32, Vec<&ReprPair>> = BTreeMap::new();
    for p in test.pairs() {
        by_seq.entry(p.seq_id).or_default().push(p);
    }
    let d = test.dim();
    let mut out = Vec::with_capacity(by_seq.len());
    for (seq_id, mut pairs) in by_seq {
        pairs.sort_by_key(|p| p.pos);
        let positions: Vec<u32> = pairs.iter().map(|p| p.pos).collect();
        let complete = positions.iter().enumerate().all(|(i, &p)| p == i as u32);
        let mut case = match backend {
            Backend::Toy(b) => {
                let len = b
                    .tokens(seq_id)
                    .ok_or_else(|| LensError::Config(format!("toy tokens file lacks test sequence {seq_id}")))?
                    .len();
                b.case(seq_id, layer as usize, (0..len as u32).collect())
                    .stage("intervention setup")?
            }
            Backend::Remote(_) => {
                if !complete {
                    return Err(LensError::Config(format!(
                        "resume service runs need every position of each test sequence in the dump; sequence {seq_id} has {} pairs that do not cover positions 0..{}",
                        positions.len(),
                        positions.len()
                    )));
                }
                SequenceCase {
                    seq_id,
                    seq_len: pairs.len(),
                    h_in: pairs.iter().flat_map(|p| p.h_in.iter().copied()).collect(),
                    h_out: pairs.iter().flat_map(|p| p.h_out.iter().copied()).collect(),
                    evaluated: positions.clone(),
                    sampled: Vec::new(),
                }
            }
        };
        debug_assert_eq!(case.h_in.len(), case.seq_len * d);
        case.sampled = if complete && positions.len() > cfg.positions {
            let mask = vec![true; positions.len()];
            sample_positions(
                positions.len(),
                &mask,
                cfg.positions,
                derive_seed(cfg.seed, u64::from(seq_id)),
            )
            .stage("position sampling")?
        } else {
            positions
        };
        out.push(TestSequence { case });
    }
    Ok(out)
}

fn row(x: &[f32], pos: u32, d: usize) -> Vec<f64> {
    to_f64(&x[pos as usize * d..(pos as usize + 1) * d])
}

struct SequenceResult {
    records_all: Vec<EvalRecord>,
    geometry: Vec<GeometryRecord>,
    saved: Vec<KeyedMap>,
}

#[allow(clippy::too_many_arguments)]
fn run_sequence(
    cfg: &RunConfig,
    backend: &(dyn ResumeBackend + Sync),
    provider: &Provider<'_>,
    layer: u32,
    case: &SequenceCase,
    ks: &[usize],
    heuristic: bool,
) -> layerlens_core::Result<SequenceResult> {
    let d = backend.dim();
    let maps = (0..case.seq_len as u32)
        .map(|p| provider.map_for(&row(&case.h_in, p, d)))
        .collect::<layerlens_core::Result<Vec<_>>>()?;
    let records_all = intervene_sequence(backend, layer as usize, case, cfg.mode.mode(), |_, p| {
        maps.get(p as usize).cloned()
    })?;
    let mut geometry = Vec::with_capacity(case.sampled.len());
    let mut saved = Vec::new();
    for &p in &case.sampled {
        let map = &maps[p as usize];
        let triple = make_triple(&row(&case.h_in, p, d), &row(&case.h_out, p, d), map)?;
        geometry.push(geometry_record(case.seq_id, p, &triple, map, ks, heuristic)?);
        if cfg.save_maps {
            saved.push(KeyedMap {
                seq_id: case.seq_id,
                pos: p,
                map: map.clone(),
            });
        }
    }
    Ok(SequenceResult {
        records_all,
        geometry,
        saved,
    })
}

fn projection_ks(cfg: &RunConfig, class: MapClass, dim: usize) -> (Vec<usize>, bool) {
    let heuristic = cfg.mlp.heuristic_projection;
    if class == MapClass::Mlp && !heuristic {
        return (Vec::new(), false);
    }
    (cfg.ks.iter().copied().filter(|&k| k <= dim).collect(), heuristic)
}

fn layer_plots(dir: &Path, tag: &str, layers: &[LayerOutcome], ks: &[usize]) -> Result<()> {
    for l in layers {
        let points: Vec<(f64, f64)> = l.records.iter().filter_map(|r| Some((r.rel_err?, r.kl))).collect();
        let chart = Chart {
            title: format!("{tag}: RelErr vs KL, layer {}", l.layer),
            x_label: "RelErr".into(),
            y_label: "KL (nats)".into(),
            y_scale: Scale::Log1p,
            series: vec![Series::Points {
                label: format!("layer {}", l.layer),
                points,
            }],
        };
        write(&dir.join(format!("scatter_{}.svg", l.layer)), chart.render())?;
    }
    let line = |label: &str, f: &dyn Fn(&LayerSummary) -> Option<f64>| Series::Line {
        label: label.into(),
        points: layers
            .iter()
            .filter_map(|l| Some((f64::from(l.layer), f(&l.summary)?)))
            .collect(),
    };
    let chart = Chart {
        title: format!("{tag}: per-layer Spearman and residual size"),
        x_label: "layer".into(),
        y_label: "value".into(),
        y_scale: Scale::Linear,
        series: vec![
            line("Spearman rho", &|s| s.spearman_rho),
            line("|r| / |full update|", &|s| s.residual.mean_ratio_to_update),
            line("mean RelErr", &|s| s.mean_rel_err),
        ],
    };
    write(&dir.join("layers.svg"), chart.render())?;
    let full: Vec<f64> = layers
        .iter()
        .flat_map(|l| l.geometry.iter().filter_map(|g| g.full_tok.map(|a| a.abs_cos)))
        .collect();
    let res: Vec<f64> = layers
        .iter()
        .flat_map(|l| l.geometry.iter().filter_map(|g| g.res_tok.map(|a| a.abs_cos)))
        .collect();
    let hist = plot::histogram(
        &format!("{tag}: alignment with the tokenwise update"),
        "absolute cosine",
        &[
            ("full vs tokenwise".into(), full),
            ("residual vs tokenwise".into(), res),
        ],
        0.0,
        1.0,
        20,
    );
    write(&dir.join("alignment.svg"), hist)?;
    if !ks.is_empty() {
        let cats: Vec<String> = ks.iter().map(|k| format!("k={k}")).collect();
        let series: Vec<(String, Vec<f64>)> = [("full", 0usize), ("tokenwise", 1), ("residual", 2)]
            .iter()
            .map(|&(name, which)| {
                let vals = ks
                    .iter()
                    .map(|&k| {
                        mean(layers.iter().flat_map(|l| {
                            l.geometry.iter().filter_map(move |g| {
                                let p = g.projections.iter().find(|p| p.k == k)?;
                                [p.full, p.tok, p.res][which]
                            })
                        }))
                        .unwrap_or(f64::NAN)
                    })
                    .collect();
                (name.to_string(), vals)
            })
            .collect();
        write(
            &dir.join("projection.svg"),
            plot::bars(
                &format!("{tag}: energy in the top-k map subspace"),
                "mean fraction of energy",
                &cats,
                &series,
            ),
        )?;
    }
    Ok(())
}

fn notes(cfg: &RunConfig) -> Vec<String> {
    let mut n = vec![
        "maps are fitted on train-split neighborhoods; each test token queries the train index with its own h_l"
            .to_string(),
        "the anchor belongs to its own neighborhood, so train-split statistics are in-sample".to_string(),
        "geometry is reported for both splits; test records cover the sampled positions".to_string(),
        "kl_all_positions averages KL over every position of each test sequence".to_string(),
        format!(
            "least-squares ridge is {} * trace(X^T X) / d per neighborhood",
            cfg.ridge
        ),
        "infinite KL is excluded from means and ranked highest in Spearman".to_string(),
        "the Overall regime row pools tokens rather than averaging regimes".to_string(),
        "Spearman mean across layers is unweighted".to_string(),
    ];
    if cfg.anchors.is_some() {
        n.push(format!(
            "tokens use inverse-cosine-distance blends of the {} nearest anchor maps (nearest anchor for MLP maps)",
            cfg.interpolate
        ));
    }
    n
}

/// Runs the analysis on `ing`, writing reports into `dir`.
pub fn run_on(cfg: &RunConfig, ing: &Ingested, client: Option<ResumeClient>, dir: &Path) -> Result<RunOutcome> {
    let m = &ing.manifest;
    let dim = m.hidden_dim as usize;
    let mut warnings = Vec::new();
    if let Some(c) = &client {
        let info = c.info();
        if info.hidden_dim != m.hidden_dim || info.num_layers != m.num_layers {
            return Err(LensError::Config(format!(
                "resume service reports {} layers of width {}, the dump {} of width {}",
                info.num_layers, info.hidden_dim, m.num_layers, m.hidden_dim
            )));
        }
    }
    let backend = match (client, &ing.toy) {
        (Some(c), _) => Backend::Remote(c),
        (None, Some(toy)) => {
            let seqs: Vec<(u32, Vec<u32>)> = toy
                .sequences
                .iter()
                .filter(|s| s.split == Split::Test.as_str())
                .map(|s| (s.seq_id, s.tokens.clone()))
                .collect();
            Backend::Toy(ToyBackend::new(&toy.model, &seqs).stage("toy baseline")?)
        }
        (None, None) => {
            return Err(LensError::Config(
                "the dump carries no toy model; set endpoint to a resume service".into(),
            ))
        }
    };
    let layers: Vec<u32> = match &cfg.layers {
        Some(l) => l.clone(),
        None => m.layers(),
    };
    for &l in &layers {
        for split in [Split::Train, Split::Test] {
            if store::find(&ing.datasets, l, split).is_none() {
                return Err(LensError::Config(format!(
                    "the dump has no {split} pairs for layer {l}"
                )));
            }
        }
    }
    let (specs, skipped) = cfg.result_sets(dim);
    warnings.extend(skipped);
    if specs.is_empty() {
        return Err(LensError::Config(
            "no result set left after skipping ranks above the hidden size".into(),
        ));
    }
    for &k in cfg.ks.iter().filter(|&&k| k > dim) {
        warnings.push(format!("projection rank {k} exceeds hidden size {dim}; skipped"));
    }
    for &l in &layers {
        let train = store::find(&ing.datasets, l, Split::Train).expect("checked");
        if cfg.k > train.len() {
            return Err(LensError::Config(format!(
                "k = {} exceeds the {} train pairs of layer {l}",
                cfg.k,
                train.len()
            )));
        }
        if let Some(a) = cfg.anchors {
            if a > train.len() {
                return Err(LensError::Config(format!(
                    "anchors = {a} exceeds the {} train pairs of layer {l}",
                    train.len()
                )));
            }
        }
    }
    let pool = thread_pool()?;
    write(&dir.join(RUN_FILE), cfg.to_json())?;

    let mut set_layers: Vec<Vec<LayerOutcome>> = specs.iter().map(|_| Vec::new()).collect();
    let mut set_maps: Vec<Vec<(u32, Vec<KeyedMap>)>> = specs.iter().map(|_| Vec::new()).collect();
    for &l in &layers {
        let train = store::find(&ing.datasets, l, Split::Train).expect("checked");
        let test = store::find(&ing.datasets, l, Split::Test).expect("checked");
        let index = build_index(&train.inputs_flat(), dim).stage("neighbor index")?;
        let cases = test_cases(cfg, l, test, &backend)?;
        for (si, spec) in specs.iter().enumerate() {
            let provider = match spec.class {
                MapClass::GlobalDiagPsd => Provider::Global(fit_global_diag(train).stage("fit")?),
                _ => match cfg.anchors {
                    None => Provider::Local {
                        train,
                        index: &index,
                        spec: *spec,
                    },
                    Some(count) => {
                        let picks = select_anchors(train.len(), count, derive_seed(cfg.seed, u64::from(l)))
                            .stage("anchor selection")?;
                        let anchors = pool
                            .install(|| {
                                picks
                                    .par_iter()
                                    .map(|&a| {
                                        let map = fit_anchor(train, &index, a, &spec.fit)?;
                                        Ok((map, to_f64(&train.pairs()[a].h_in)))
                                    })
                                    .collect::<layerlens_core::Result<Vec<_>>>()
                            })
                            .stage("fit")?;
                        Provider::Anchored {
                            anchors,
                            p: cfg.interpolate,
                        }
                    }
                },
            };
            let (ks, heuristic) = projection_ks(cfg, spec.class, dim);
            let train_maps = pool.install(|| provider.train_maps(train)).stage("fit")?;
            let train_geometry = pool
                .install(|| geometry_batch(train, &train_maps, &ks, heuristic))
                .stage("geometry")?;
            let train_rel_err = train
                .pairs()
                .iter()
                .zip(&train_maps)
                .map(|(p, map)| Ok(rel_err(&map.apply(&to_f64(&p.h_in))?, &to_f64(&p.h_out))))
                .collect::<layerlens_core::Result<Vec<_>>>()
                .stage("geometry")?;
            drop(train_maps);
            let backend_ref = backend.get();
            let results = pool
                .install(|| {
                    cases
                        .par_iter()
                        .map(|t| run_sequence(cfg, backend_ref, &provider, l, &t.case, &ks, heuristic))
                        .collect::<layerlens_core::Result<Vec<_>>>()
                })
                .stage("intervention")?;
            let mut records_all = Vec::new();
            let mut records = Vec::new();
            let mut geometry = Vec::new();
            let mut saved = Vec::new();
            for (t, r) in cases.iter().zip(results) {
                let sampled: BTreeSet<u32> = t.case.sampled.iter().copied().collect();
                records.extend(r.records_all.iter().filter(|e| sampled.contains(&e.pos)).cloned());
                records_all.extend(r.records_all);
                geometry.extend(r.geometry);
                saved.extend(r.saved);
            }
            let summary = summarize_layer(&records, &geometry, l);
            set_layers[si].push(LayerOutcome {
                layer: l,
                records,
                records_all,
                geometry,
                train_geometry,
                train_rel_err,
                summary,
            });
            if cfg.save_maps {
                set_maps[si].push((l, saved));
            }
        }
    }

    let mut sets_json = Vec::new();
    let mut outcomes = Vec::new();
    for ((spec, layers_out), maps) in specs.iter().zip(set_layers).zip(set_maps) {
        let tag = spec.tag();
        let sdir = dir.join(&tag);
        fs::create_dir_all(&sdir).map_err(|e| LensError::io(&sdir, e))?;
        let (ks, _) = projection_ks(cfg, spec.class, dim);
        for lo in &layers_out {
            write(
                &sdir.join(format!("records_{}.csv", lo.layer)),
                records_csv(&lo.records, &lo.geometry, &ks),
            )?;
        }
        for (l, keyed) in &maps {
            mapfile::save(&sdir.join(mapfile::map_file_name(*l)), *l, dim, keyed)?;
        }
        layer_plots(&sdir, &tag, &layers_out, &ks)?;
        let summaries: Vec<LayerSummary> = layers_out.iter().map(|l| l.summary.clone()).collect();
        let model = model_summary(&summaries).ok().map(|s| ModelJson::from(&s));
        if model.is_none() {
            warnings.push(format!("{tag}: no layer has a defined Spearman correlation"));
        }
        let pooled: Vec<EvalRecord> = layers_out.iter().flat_map(|l| l.records.iter().cloned()).collect();
        let all_train: Vec<f64> = layers_out
            .iter()
            .flat_map(|l| l.train_rel_err.iter().flatten().copied())
            .collect();
        let layer_json = layers_out
            .iter()
            .map(|lo| {
                let errs: Vec<f64> = lo.train_rel_err.iter().flatten().copied().collect();
                LayerJson {
                    layer: lo.layer,
                    test: SummaryJson::from(&lo.summary),
                    kl_sampled_positions: KlAggregate::of(&lo.records),
                    kl_all_positions: KlAggregate::of(&lo.records_all),
                    regimes: bin_regimes(&lo.records).ok().map(|t| RegimeJson::from(&t)),
                    train: TrainJson {
                        summary: SummaryJson::from(&summarize_layer(&[], &lo.train_geometry, lo.layer)),
                        mean_rel_err: mean(errs.iter().copied()),
                        median_rel_err: median(errs),
                    },
                }
            })
            .collect();
        sets_json.push(SetJson {
            tag: tag.clone(),
            class: spec.class.to_string(),
            rank: match spec.class {
                MapClass::LocalLowRank { rank } => Some(rank),
                _ => None,
            },
            mode: cfg.mode.mode().tag().to_string(),
            k: cfg.k,
            layers: layer_json,
            model,
            regimes_pooled: bin_regimes(&pooled).ok().map(|t| RegimeJson::from(&t)),
            median_train_rel_err: median(all_train),
        });
        outcomes.push(SetOutcome {
            spec: *spec,
            layers: layers_out,
        });
    }

    let count = |split: Split| -> BTreeMap<u32, usize> {
        ing.datasets
            .iter()
            .filter(|d| d.split() == split && layers.contains(&d.layer_index()))
            .map(|d| (d.layer_index(), d.len()))
            .collect()
    };
    let report = Report {
        tool: "layerlens".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.clone(),
        source: SourceJson {
            dump: ing.dir.as_ref().map(|d| d.display().to_string()),
            model_name: m.model_name.clone(),
            num_layers: m.num_layers,
            hidden_dim: m.hidden_dim,
            seq_len: m.seq_len,
            backend: match &backend {
                Backend::Toy(_) => "toy".into(),
                Backend::Remote(c) => format!("resume service {}", c.endpoint()),
            },
            train_pairs: count(Split::Train),
            test_pairs: count(Split::Test),
        },
        notes: notes(cfg),
        warnings,
        sets: sets_json,
        bootstrap: None,
    };
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write(&dir.join(REPORT_FILE), json)?;
    Ok(RunOutcome { report, sets: outcomes })
}

/// `run`: full pipeline into `cfg.out`. Partial outputs are removed on failure.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let client = connect(cfg)?;
    let ing = ingest(cfg)?;
    staged(&cfg.out, &[RUN_FILE], |dir| run_on(cfg, &ing, client, dir))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub tag: String,
    /// Reason the point was skipped.
    pub skipped: Option<String>,
    pub mean_rho: Option<f64>,
    pub median_train_rel_err: Option<f64>,
    pub mean_test_rel_err: Option<f64>,
    pub mean_align_full_tok: Option<f64>,
    pub mean_align_res_tok: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub config: RunConfig,
    pub rows: Vec<SweepRow>,
    pub warnings: Vec<String>,
}

fn sweep_rows(value: usize, report: &Report) -> Vec<SweepRow> {
    report
        .sets
        .iter()
        .map(|s| {
            let over = |f: &dyn Fn(&LayerJson) -> Option<f64>| mean(s.layers.iter().filter_map(f));
            SweepRow {
                value,
                tag: s.tag.clone(),
                skipped: None,
                mean_rho: s.model.as_ref().map(|m| m.mean_rho),
                median_train_rel_err: s.median_train_rel_err,
                mean_test_rel_err: over(&|l| l.test.mean_rel_err),
                mean_align_full_tok: over(&|l| l.test.mean_align_full_tok),
                mean_align_res_tok: over(&|l| l.test.mean_align_res_tok),
            }
        })
        .collect()
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
    let mut out = String::from(
        "value,tag,skipped,mean_rho,median_train_rel_err,mean_test_rel_err,mean_align_full_tok,mean_align_res_tok\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.value,
            r.tag,
            r.skipped.as_deref().unwrap_or("").replace(',', ";"),
            f(r.mean_rho),
            f(r.median_train_rel_err),
            f(r.mean_test_rel_err),
            f(r.mean_align_full_tok),
            f(r.mean_align_res_tok)
        ));
    }
    out
}

/// `sweep`: one run per rank or neighborhood size on shared ingested data,
/// each in its own subdirectory, plus a combined table and plot.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| LensError::Config("sweep needs sweep.kind and sweep.values".into()))?;
    let ing = ingest(cfg)?;
    let dim = ing.manifest.hidden_dim as usize;
    let smallest_train = ing
        .datasets
        .iter()
        .filter(|d| d.split() == Split::Train && cfg.layers.as_ref().is_none_or(|l| l.contains(&d.layer_index())))
        .map(LayerDataset::len)
        .min()
        .unwrap_or(0);
    staged(&cfg.out, &[SWEEP_FILE], |dir| {
        write(&dir.join(RUN_FILE), cfg.to_json())?;
        let mut rows = Vec::new();
        let mut warnings = Vec::new();
        for &v in &sweep.values {
            let mut sub = cfg.clone();
            sub.sweep = None;
            let name = match sweep.kind {
                SweepKind::Rank => {
                    sub.classes = vec![crate::config::ClassName::Lowrank];
                    sub.ranks = vec![v];
                    format!("rank_{v}")
                }
                SweepKind::K => {
                    sub.k = v;
                    format!("k_{v}")
                }
            };
            let skip = match sweep.kind {
                SweepKind::Rank if v > dim => Some(format!("rank {v} exceeds hidden size {dim}")),
                SweepKind::K if v > smallest_train => {
                    Some(format!("k {v} exceeds the {smallest_train} train pairs of a layer"))
                }
                _ => None,
            };
            if let Some(reason) = skip {
                warnings.push(format!("{name}: skipped, {reason}"));
                rows.push(SweepRow {
                    value: v,
                    tag: name,
                    skipped: Some(reason),
                    mean_rho: None,
                    median_train_rel_err: None,
                    mean_test_rel_err: None,
                    mean_align_full_tok: None,
                    mean_align_res_tok: None,
                });
                continue;
            }
            sub.out = cfg.out.join(&name);
            let sdir = dir.join(&name);
            fs::create_dir_all(&sdir).map_err(|e| LensError::io(&sdir, e))?;
            let client = connect(&sub)?;
            let outcome = run_on(&sub, &ing, client, &sdir)?;
            rows.extend(sweep_rows(v, &outcome.report));
        }
        let mut families: BTreeMap<String, Vec<&SweepRow>> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.skipped.is_none()) {
            let family = match sweep.kind {
                SweepKind::Rank => "lowrank".to_string(),
                SweepKind::K => r.tag.clone(),
            };
            families.entry(family).or_default().push(r);
        }
        let mut series = Vec::new();
        for (fam, rs) in &families {
            series.push(Series::Line {
                label: format!("{fam} median train RelErr"),
                points: rs
                    .iter()
                    .filter_map(|r| Some((r.value as f64, r.median_train_rel_err?)))
                    .collect(),
            });
            series.push(Series::Line {
                label: format!("{fam} mean test RelErr"),
                points: rs
                    .iter()
                    .filter_map(|r| Some((r.value as f64, r.mean_test_rel_err?)))
                    .collect(),
            });
        }
        let chart = Chart {
            title: format!(
                "RelErr across {}",
                match sweep.kind {
                    SweepKind::Rank => "rank",
                    SweepKind::K => "neighborhood size",
                }
            ),
            x_label: match sweep.kind {
                SweepKind::Rank => "rank r".into(),
                SweepKind::K => "neighborhood size k".into(),
            },
            y_label: "RelErr".into(),
            y_scale: Scale::Linear,
            series,
        };
        write(&dir.join("sweep.svg"), chart.render())?;
        write(&dir.join("sweep.csv"), sweep_csv(&rows))?;
        let report = SweepReport {
            kind: sweep.kind,
            config: cfg.clone(),
            rows,
            warnings,
        };
        let mut json = serde_json::to_vec_pretty(&report).expect("sweep serializes");
        json.push(b'\n');
        write(&dir.join(SWEEP_FILE), json)?;
        Ok(report)
    })
}

/// Human-readable summary of a dump directory or a map file.
pub fn inspect(path: &Path) -> Result<String> {
    if path.is_dir() {
        let m = store::read_manifest(path)?;
        let mut out = format!(
            "dump {}\n  model {}\n  layers {} (transitions {:?})\n  hidden_dim {}\n  seq_len {}\n  seed {}\n  dtype {}\n",
            path.display(),
            m.model_name,
            m.num_layers,
            m.layers(),
            m.hidden_dim,
            m.seq_len,
            m.seed,
            m.dtype
        );
        if let Some(h) = &m.hook {
            out.push_str(&format!("  hook {h}\n"));
        }
        if let Some(t) = &m.toy {
            out.push_str(&format!("  toy checkpoint {} tokens {}\n", t.checkpoint, t.tokens));
        }
        for f in &m.layer_files {
            out.push_str(&format!(
                "  layer {} {:5} {:>7} pairs  {}\n",
                f.layer_index, f.split, f.count, f.path
            ));
        }
        return Ok(out);
    }
    let file = mapfile::load(path)?;
    let mut classes: BTreeMap<String, usize> = BTreeMap::new();
    for k in &file.maps {
        *classes.entry(k.map.class.to_string()).or_default() += 1;
    }
    let mut out = format!(
        "maps {}\n  layer {}\n  dim {}\n  count {}\n",
        path.display(),
        file.layer,
        file.dim,
        file.maps.len()
    );
    for (c, n) in classes {
        out.push_str(&format!("  {c}: {n}\n"));
    }
    Ok(out)
}
