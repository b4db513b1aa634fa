//! Resume-from-layer interventions `h_{ℓ+1} ← T(h_ℓ)` and the resulting
//! output perturbation.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

// Float math comes from the trait on targets without inherent float methods.
use crate::analysis::{rel_err, EvalRecord};
use crate::error::{Error, Result};
use crate::fit::TokenwiseMap;
use crate::linalg::to_f64;
use crate::toy::ToyModel;
#[allow(unused_imports)]
use num_traits::Float;

const NORMALIZATION_TOL: f64 = 1e-4;

/// `KL(p ‖ q) = Σ p·(log p − log q)` in nats over the full support. Returns
/// `f64::INFINITY` when `q` drops support that `p` has. Tiny negative values
/// from rounding are clamped to zero.
pub fn kl_divergence(p_log: &[f64], q_log: &[f64]) -> Result<f64> {
    if p_log.len() != q_log.len() {
        return Err(Error::DimensionMismatch {
            expected: p_log.len(),
            got: q_log.len(),
        });
    }
    if p_log.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    for dist in [p_log, q_log] {
        if dist.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(Error::NonFinite("log-probabilities"));
        }
        let mass: f64 = dist.iter().map(|v| v.exp()).sum();
        if (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::NotNormalized { mass });
        }
    }
    let mut total = 0.0;
    for (&lp, &lq) in p_log.iter().zip(q_log) {
        if lp == f64::NEG_INFINITY {
            continue;
        }
        if lq == f64::NEG_INFINITY {
            return Ok(f64::INFINITY);
        }
        total += lp.exp() * (lp - lq);
    }
    Ok(total.max(0.0))
}

/// Which positions of a sequence receive `T(h_ℓ)` in place of `h_{ℓ+1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterventionMode {
    /// Every position of the sequence, each through its own map.
    AllPositions,
    /// Only the sampled positions of the case.
    SampledPositions,
    /// A single position; used for causality checks.
    SinglePosition(u32),
}

impl InterventionMode {
    pub fn tag(&self) -> &'static str {
        match self {
            InterventionMode::AllPositions => "all_positions",
            InterventionMode::SampledPositions => "sampled_positions",
            InterventionMode::SinglePosition(_) => "single_position",
        }
    }
}

/// Something that can run the layers after `h_layer` on modified states and
/// report the per-position KL against the unmodified run.
pub trait ResumeBackend {
    fn num_layers(&self) -> usize;
    fn dim(&self) -> usize;
    /// `states` is the full `seq_len × d` replacement for `h_layer`, with
    /// `1 ≤ layer ≤ num_layers`.
    fn kl_at(&self, seq_id: u32, layer: usize, states: &[f32], positions: &[u32]) -> Result<Vec<f64>>;
}

/// Inputs for intervening on one sequence at one layer `ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceCase {
    pub seq_id: u32,
    pub seq_len: usize,
    /// `h_ℓ`, `seq_len × d` row-major.
    pub h_in: Vec<f32>,
    /// `h_{ℓ+1}`, `seq_len × d` row-major.
    pub h_out: Vec<f32>,
    /// Positions that produce records, ascending.
    pub evaluated: Vec<u32>,
    /// Positions replaced in sampled-positions mode, ascending.
    pub sampled: Vec<u32>,
}

fn row(x: &[f32], pos: usize, d: usize) -> &[f32] {
    &x[pos * d..(pos + 1) * d]
}

/// Replaces states per `mode`, resumes from `layer + 1` and records KL and
/// RelErr at every evaluated position. `map_for(seq_id, pos)` supplies the map
/// assigned to each token.
pub fn intervene_sequence<B, F>(
    backend: &B,
    layer: usize,
    case: &SequenceCase,
    mode: InterventionMode,
    map_for: F,
) -> Result<Vec<EvalRecord>>
where
    B: ResumeBackend + ?Sized,
    F: Fn(u32, u32) -> Option<TokenwiseMap>,
{
    let d = backend.dim();
    if layer >= backend.num_layers() {
        return Err(Error::LayerOutOfRange {
            layer,
            max: backend.num_layers() - 1,
        });
    }
    for buf in [&case.h_in, &case.h_out] {
        if buf.len() != case.seq_len * d {
            return Err(Error::DimensionMismatch {
                expected: case.seq_len * d,
                got: buf.len(),
            });
        }
    }
    if let Some(&p) = case
        .evaluated
        .iter()
        .chain(&case.sampled)
        .find(|&&p| p as usize >= case.seq_len)
    {
        return Err(Error::PositionOutOfRange {
            pos: p,
            seq_len: case.seq_len,
        });
    }
    let replaced: Vec<u32> = match mode {
        InterventionMode::AllPositions => (0..case.seq_len as u32).collect(),
        InterventionMode::SampledPositions => case.sampled.clone(),
        InterventionMode::SinglePosition(t) => {
            if t as usize >= case.seq_len {
                return Err(Error::PositionOutOfRange {
                    pos: t,
                    seq_len: case.seq_len,
                });
            }
            alloc::vec![t]
        }
    };

    let mut outputs: BTreeMap<u32, (TokenwiseMap, Vec<f64>)> = BTreeMap::new();
    for &pos in replaced.iter().chain(&case.evaluated) {
        if let alloc::collections::btree_map::Entry::Vacant(slot) = outputs.entry(pos) {
            let map = map_for(case.seq_id, pos).ok_or(Error::MissingMap {
                seq_id: case.seq_id,
                pos,
            })?;
            let t = map.apply(&to_f64(row(&case.h_in, pos as usize, d)))?;
            slot.insert((map, t));
        }
    }

    let mut states = case.h_out.clone();
    for &p in &replaced {
        let t = &outputs[&p].1;
        for (s, &v) in states[p as usize * d..(p as usize + 1) * d].iter_mut().zip(t) {
            *s = v as f32;
        }
    }
    let kls = backend.kl_at(case.seq_id, layer + 1, &states, &case.evaluated)?;
    if kls.len() != case.evaluated.len() {
        return Err(Error::DimensionMismatch {
            expected: case.evaluated.len(),
            got: kls.len(),
        });
    }
    case.evaluated
        .iter()
        .zip(kls)
        .map(|(&p, kl)| {
            let (map, t) = &outputs[&p];
            Ok(EvalRecord {
                layer: layer as u32,
                seq_id: case.seq_id,
                pos: p,
                class: map.class,
                rel_err: rel_err(t, &to_f64(row(&case.h_out, p as usize, d))),
                kl,
            })
        })
        .collect()
}

/// Sequential intervention over many sequences; records come back in case
/// order.
pub fn intervene_layer<B, F>(
    backend: &B,
    layer: usize,
    cases: &[SequenceCase],
    mode: InterventionMode,
    map_for: F,
) -> Result<Vec<EvalRecord>>
where
    B: ResumeBackend + ?Sized,
    F: Fn(u32, u32) -> Option<TokenwiseMap>,
{
    let mut out = Vec::new();
    for case in cases {
        out.extend(intervene_sequence(backend, layer, case, mode, &map_for)?);
    }
    Ok(out)
}

/// Resume backend over the in-process toy model. Baseline log-probabilities are
/// computed once per sequence.
#[derive(Debug, Clone)]
pub struct ToyBackend<'a> {
    model: &'a ToyModel,
    sequences: BTreeMap<u32, (Vec<u32>, Vec<f32>)>,
}

impl<'a> ToyBackend<'a> {
    pub fn new(model: &'a ToyModel, sequences: &[(u32, Vec<u32>)]) -> Result<ToyBackend<'a>> {
        let mut map = BTreeMap::new();
        for (id, tokens) in sequences {
            let pass = model.forward(tokens)?;
            map.insert(*id, (tokens.clone(), pass.log_probs));
        }
        Ok(ToyBackend { model, sequences: map })
    }

    pub fn model(&self) -> &ToyModel {
        self.model
    }

    pub fn tokens(&self, seq_id: u32) -> Option<&[u32]> {
        self.sequences.get(&seq_id).map(|(t, _)| t.as_slice())
    }

    /// Builds the intervention inputs for `seq_id` at layer `layer` from a
    /// fresh forward pass. The sampled positions default to `evaluated`.
    pub fn case(&self, seq_id: u32, layer: usize, evaluated: Vec<u32>) -> Result<SequenceCase> {
        let tokens = self.tokens(seq_id).ok_or(Error::UnknownSequence { seq_id })?;
        if layer >= self.model.config().num_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                max: self.model.config().num_layers - 1,
            });
        }
        let mut pass = self.model.forward(tokens)?;
        Ok(SequenceCase {
            seq_id,
            seq_len: tokens.len(),
            h_out: core::mem::take(&mut pass.hidden[layer + 1]),
            h_in: core::mem::take(&mut pass.hidden[layer]),
            sampled: evaluated.clone(),
            evaluated,
        })
    }
}

impl ResumeBackend for ToyBackend<'_> {
    fn num_layers(&self) -> usize {
        self.model.config().num_layers
    }

    fn dim(&self) -> usize {
        self.model.config().dim
    }

    fn kl_at(&self, seq_id: u32, layer: usize, states: &[f32], positions: &[u32]) -> Result<Vec<f64>> {
        let (tokens, baseline) = self.sequences.get(&seq_id).ok_or(Error::UnknownSequence { seq_id })?;
        let v = self.model.config().vocab_size;
        let perturbed = self.model.resume(tokens, layer, states)?;
        positions
            .iter()
            .map(|&pos| {
                let p = pos as usize;
                if p >= tokens.len() {
                    return Err(Error::PositionOutOfRange {
                        pos,
                        seq_len: tokens.len(),
                    });
                }
                let a = to_f64(&baseline[p * v..(p + 1) * v]);
                let b = to_f64(&perturbed[p * v..(p + 1) * v]);
                kl_divergence(&a, &b)
            })
            .collect()
    }
}
