use alloc::vec;
use alloc::vec::Vec;
// Float math comes from the trait on targets without inherent float methods.
use core::ops::Range;
#[allow(unused_imports)]
use num_traits::Float;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::repr::rng;

pub(crate) const LN_EPS: f32 = 1e-5;

/// Shape of a pre-LayerNorm GPT-style decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub num_layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub mlp_hidden: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            vocab_size: 256,
            num_layers: 4,
            dim: 32,
            heads: 2,
            max_seq_len: 64,
            mlp_hidden: 128,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.vocab_size > 0
            && self.num_layers > 0
            && self.dim > 0
            && self.heads > 0
            && self.dim.is_multiple_of(self.heads)
            && self.max_seq_len > 0
            && self.mlp_hidden > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(alloc::format!("invalid toy model shape {self:?}")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Offsets of one block's tensors in the flat parameter vector. Weight
/// matrices are stored `in × out`, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct BlockLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_attn_out: Range<usize>,
    pub b_attn_out: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_fc_out: Range<usize>,
    pub b_fc_out: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub blocks: Vec<BlockLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub unembed: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ToyConfig) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let d = c.dim;
        let tok_emb = take(c.vocab_size * d);
        let pos_emb = take(c.max_seq_len * d);
        let blocks = (0..c.num_layers)
            .map(|_| BlockLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_attn_out: take(d * d),
                b_attn_out: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * c.mlp_hidden),
                b_fc: take(c.mlp_hidden),
                w_fc_out: take(c.mlp_hidden * d),
                b_fc_out: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let unembed = take(d * c.vocab_size);
        Layout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            unembed,
            total: at,
        }
    }
}

/// Weights of the bundled decoder. Supports full forward passes and resuming
/// execution from any intermediate residual-stream state.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    pub(crate) layout: Layout,
    params: Vec<f32>,
}

/// Hidden states `h_0..h_L` (each `T × d`, row-major) and per-position
/// log-probabilities (`T × V`).
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub seq_len: usize,
    pub hidden: Vec<Vec<f32>>,
    pub log_probs: Vec<f32>,
}

impl ForwardPass {
    pub fn log_probs_at(&self, pos: usize, vocab: usize) -> &[f32] {
        &self.log_probs[pos * vocab..(pos + 1) * vocab]
    }
}

impl ToyModel {
    /// GPT-2 style random initialization, deterministic in `seed`.
    pub fn random(config: ToyConfig, seed: u64) -> Result<ToyModel> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0f32; layout.total];
        let mut r = rng(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let resid = Normal::new(0.0f32, 0.02 / (2.0 * config.num_layers as f32).sqrt()).expect("valid std");
        let mut fill = |range: &Range<usize>, dist: &Normal<f32>, params: &mut [f32]| {
            for p in &mut params[range.clone()] {
                *p = dist.sample(&mut r);
            }
        };
        fill(&layout.tok_emb, &normal, &mut params);
        fill(&layout.pos_emb, &normal, &mut params);
        for b in &layout.blocks {
            fill(&b.w_qkv, &normal, &mut params);
            fill(&b.w_attn_out, &resid, &mut params);
            fill(&b.w_fc, &normal, &mut params);
            fill(&b.w_fc_out, &resid, &mut params);
            params[b.ln1_g.clone()].fill(1.0);
            params[b.ln2_g.clone()].fill(1.0);
        }
        fill(&layout.unembed, &normal, &mut params);
        params[layout.lnf_g.clone()].fill(1.0);
        Ok(ToyModel { config, layout, params })
    }

    pub fn from_params(config: ToyConfig, params: Vec<f32>) -> Result<ToyModel> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("toy model parameters"));
        }
        Ok(ToyModel { config, layout, params })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub(crate) fn p(&self, r: &Range<usize>) -> &[f32] {
        &self.params[r.clone()]
    }

    pub(crate) fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() || tokens.len() > c.max_seq_len {
            return Err(Error::BadSequenceLength {
                len: tokens.len(),
                max: c.max_seq_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                token: t,
                vocab: c.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn embed(&self, tokens: &[u32]) -> Vec<f32> {
        let d = self.config.dim;
        let wte = self.p(&self.layout.tok_emb);
        let wpe = self.p(&self.layout.pos_emb);
        let mut h = vec![0.0; tokens.len() * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let row = &mut h[t * d..(t + 1) * d];
            let e = &wte[tok as usize * d..(tok as usize + 1) * d];
            let p = &wpe[t * d..(t + 1) * d];
            for i in 0..d {
                row[i] = e[i] + p[i];
            }
        }
        h
    }

    /// Teacher-forced pass over `tokens`, returning every layer's states.
    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardPass> {
        self.check_tokens(tokens)?;
        let seq_len = tokens.len();
        let mut hidden = Vec::with_capacity(self.config.num_layers + 1);
        hidden.push(self.embed(tokens));
        for b in 0..self.config.num_layers {
            let next = self.block(b, hidden.last().expect("nonempty"), seq_len, None);
            hidden.push(next);
        }
        let log_probs = self.head(hidden.last().expect("nonempty"), seq_len, None);
        Ok(ForwardPass {
            seq_len,
            hidden,
            log_probs,
        })
    }

    /// Runs the blocks after `layer` starting from `states` (`T × d`) taken as
    /// `h_layer`, returning final log-probabilities. `layer = L` applies only
    /// the output head.
    pub fn resume(&self, tokens: &[u32], layer: usize, states: &[f32]) -> Result<Vec<f32>> {
        self.check_tokens(tokens)?;
        let c = &self.config;
        if layer == 0 || layer > c.num_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                max: c.num_layers,
            });
        }
        let seq_len = tokens.len();
        if states.len() != seq_len * c.dim {
            return Err(Error::DimensionMismatch {
                expected: seq_len * c.dim,
                got: states.len(),
            });
        }
        let mut h = states.to_vec();
        for b in layer..c.num_layers {
            h = self.block(b, &h, seq_len, None);
        }
        Ok(self.head(&h, seq_len, None))
    }

    /// One transformer block. When `cache` is given, intermediate activations
    /// are recorded for backpropagation.
    pub(crate) fn block(
        &self,
        b: usize,
        h: &[f32],
        seq_len: usize,
        cache: Option<&mut super::train::BlockCache>,
    ) -> Vec<f32> {
        let c = &self.config;
        let (d, hd) = (c.dim, c.mlp_hidden);
        let l = &self.layout.blocks[b];

        let (ln1, ln1_mean, ln1_rstd) = layer_norm(h, self.p(&l.ln1_g), self.p(&l.ln1_b), d);
        let qkv = matmul(&ln1, self.p(&l.w_qkv), Some(self.p(&l.b_qkv)), seq_len, d, 3 * d);
        let (att, probs) = causal_attention(&qkv, seq_len, d, c.heads);
        let att_proj = matmul(&att, self.p(&l.w_attn_out), Some(self.p(&l.b_attn_out)), seq_len, d, d);
        let h2: Vec<f32> = h.iter().zip(&att_proj).map(|(a, b)| a + b).collect();

        let (ln2, ln2_mean, ln2_rstd) = layer_norm(&h2, self.p(&l.ln2_g), self.p(&l.ln2_b), d);
        let fc = matmul(&ln2, self.p(&l.w_fc), Some(self.p(&l.b_fc)), seq_len, d, hd);
        let fc_act: Vec<f32> = fc.iter().map(|&x| gelu(x)).collect();
        let fc_out = matmul(&fc_act, self.p(&l.w_fc_out), Some(self.p(&l.b_fc_out)), seq_len, hd, d);
        let out: Vec<f32> = h2.iter().zip(&fc_out).map(|(a, b)| a + b).collect();

        if let Some(cache) = cache {
            *cache = super::train::BlockCache {
                input: h.to_vec(),
                ln1,
                ln1_mean,
                ln1_rstd,
                qkv,
                probs,
                att,
                h2,
                ln2,
                ln2_mean,
                ln2_rstd,
                fc,
                fc_act,
            };
        }
        out
    }

    /// Final LayerNorm, unembedding and log-softmax.
    pub(crate) fn head(&self, h: &[f32], seq_len: usize, cache: Option<&mut super::train::HeadCache>) -> Vec<f32> {
        let c = &self.config;
        let (d, v) = (c.dim, c.vocab_size);
        let (lnf, mean, rstd) = layer_norm(h, self.p(&self.layout.lnf_g), self.p(&self.layout.lnf_b), d);
        let mut logits = matmul(&lnf, self.p(&self.layout.unembed), None, seq_len, d, v);
        for row in logits.chunks_exact_mut(v) {
            log_softmax_in_place(row);
        }
        if let Some(cache) = cache {
            *cache = super::train::HeadCache {
                input: h.to_vec(),
                lnf,
                mean,
                rstd,
            };
        }
        logits
    }
}

/// `out[r] = inp[r] · W + b` with `W` stored `in × out` row-major.
pub(crate) fn matmul(inp: &[f32], w: &[f32], bias: Option<&[f32]>, rows: usize, n_in: usize, n_out: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * n_out];
    for r in 0..rows {
        let o = &mut out[r * n_out..(r + 1) * n_out];
        if let Some(b) = bias {
            o.copy_from_slice(b);
        }
        let x = &inp[r * n_in..(r + 1) * n_in];
        for (i, &xi) in x.iter().enumerate() {
            let wr = &w[i * n_out..(i + 1) * n_out];
            for (oj, &wj) in o.iter_mut().zip(wr) {
                *oj += xi * wj;
            }
        }
    }
    out
}

/// Row-wise LayerNorm; also returns per-row mean and reciprocal std.
pub(crate) fn layer_norm(x: &[f32], g: &[f32], b: &[f32], d: usize) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut means = vec![0.0; rows];
    let mut rstds = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..d {
            out[r * d + i] = (row[i] - mean) * rstd * g[i] + b[i];
        }
        means[r] = mean;
        rstds[r] = rstd;
    }
    (out, means, rstds)
}

/// Multi-head causal self-attention over packed `[q | k | v]` rows. Returns
/// the concatenated head outputs and the attention probabilities
/// (`heads × T × T`, zero above the diagonal).
pub(crate) fn causal_attention(qkv: &[f32], seq_len: usize, d: usize, heads: usize) -> (Vec<f32>, Vec<f32>) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0; seq_len * d];
    let mut probs = vec![0.0; heads * seq_len * seq_len];
    for h in 0..heads {
        for t in 0..seq_len {
            let q = &qkv[t * 3 * d + h * hd..t * 3 * d + (h + 1) * hd];
            let row = &mut probs[(h * seq_len + t) * seq_len..(h * seq_len + t + 1) * seq_len];
            let mut max = f32::NEG_INFINITY;
            for s in 0..=t {
                let k = &qkv[s * 3 * d + d + h * hd..s * 3 * d + d + (h + 1) * hd];
                let score = q.iter().zip(k).map(|(a, b)| a * b).sum::<f32>() * scale;
                row[s] = score;
                max = max.max(score);
            }
            let mut total = 0.0;
            for p in &mut row[..=t] {
                *p = (*p - max).exp();
                total += *p;
            }
            for p in &mut row[..=t] {
                *p /= total;
            }
            let o = &mut out[t * d + h * hd..t * d + (h + 1) * hd];
            for s in 0..=t {
                let v = &qkv[s * 3 * d + 2 * d + h * hd..s * 3 * d + 2 * d + (h + 1) * hd];
                for (oi, vi) in o.iter_mut().zip(v) {
                    *oi += row[s] * vi;
                }
            }
        }
    }
    (out, probs)
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044_715 * x * x * x);
    let th = inner.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044_715 * x * x)
}

pub(crate) fn log_softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
    for v in row {
        *v -= lse;
    }
}
