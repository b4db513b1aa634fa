//! Manual backpropagation and Adam training for the toy decoder.

use alloc::vec;
use alloc::vec::Vec;

// Float math comes from the trait on targets without inherent float methods.
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;

use super::model::{gelu_grad, ToyModel};
use crate::error::{Error, Result};
use crate::repr::rng;

#[derive(Debug, Clone, Default)]
pub(crate) struct BlockCache {
    pub input: Vec<f32>,
    pub ln1: Vec<f32>,
    pub ln1_mean: Vec<f32>,
    pub ln1_rstd: Vec<f32>,
    pub qkv: Vec<f32>,
    pub probs: Vec<f32>,
    pub att: Vec<f32>,
    pub h2: Vec<f32>,
    pub ln2: Vec<f32>,
    pub ln2_mean: Vec<f32>,
    pub ln2_rstd: Vec<f32>,
    pub fc: Vec<f32>,
    pub fc_act: Vec<f32>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct HeadCache {
    pub input: Vec<f32>,
    pub lnf: Vec<f32>,
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

/// Mean next-token cross-entropy (nats) of one sequence.
pub fn sequence_loss(model: &ToyModel, tokens: &[u32]) -> Result<f64> {
    check_trainable(tokens)?;
    let pass = model.forward(tokens)?;
    let v = model.config().vocab_size;
    let total: f64 = (0..tokens.len() - 1)
        .map(|t| -f64::from(pass.log_probs_at(t, v)[tokens[t + 1] as usize]))
        .sum();
    Ok(total / (tokens.len() - 1) as f64)
}

fn check_trainable(tokens: &[u32]) -> Result<()> {
    if tokens.len() < 2 {
        return Err(Error::BadSequenceLength {
            len: tokens.len(),
            max: usize::MAX,
        });
    }
    Ok(())
}

/// Loss of one sequence and its gradient with respect to every parameter,
/// accumulated into `grad` (scaled by `weight`).
pub(crate) fn loss_and_grad(model: &ToyModel, tokens: &[u32], weight: f32, grad: &mut [f32]) -> Result<f64> {
    check_trainable(tokens)?;
    model.check_tokens(tokens)?;
    let c = *model.config();
    let (d, v, hd) = (c.dim, c.vocab_size, c.mlp_hidden);
    let seq_len = tokens.len();
    let lay = &model.layout;

    let mut caches = vec![BlockCache::default(); c.num_layers];
    let mut h = model.embed(tokens);
    for (b, cache) in caches.iter_mut().enumerate() {
        h = model.block(b, &h, seq_len, Some(cache));
    }
    let mut head = HeadCache::default();
    let logp = model.head(&h, seq_len, Some(&mut head));

    let n_pred = seq_len - 1;
    let mut loss = 0.0f64;
    let mut d_logits = vec![0.0f32; seq_len * v];
    for t in 0..n_pred {
        let row = &logp[t * v..(t + 1) * v];
        let target = tokens[t + 1] as usize;
        loss -= f64::from(row[target]);
        let dr = &mut d_logits[t * v..(t + 1) * v];
        for (g, &lp) in dr.iter_mut().zip(row) {
            *g = lp.exp() * weight / n_pred as f32;
        }
        dr[target] -= weight / n_pred as f32;
    }
    loss /= n_pred as f64;

    // Head.
    let d_lnf = linear_backward(
        &head.lnf,
        model.p(&lay.unembed),
        &d_logits,
        seq_len,
        d,
        v,
        grad,
        lay.unembed.start,
        None,
    );
    let mut d_h = layer_norm_backward(
        &head.input,
        &head.mean,
        &head.rstd,
        model.p(&lay.lnf_g),
        &d_lnf,
        d,
        grad,
        lay.lnf_g.start,
        lay.lnf_b.start,
    );

    for b in (0..c.num_layers).rev() {
        let cache = &caches[b];
        let l = &lay.blocks[b];

        // MLP branch: out = h2 + W_out·gelu(W_fc·ln2(h2)).
        let d_act = linear_backward(
            &cache.fc_act,
            model.p(&l.w_fc_out),
            &d_h,
            seq_len,
            hd,
            d,
            grad,
            l.w_fc_out.start,
            Some(l.b_fc_out.start),
        );
        let d_fc: Vec<f32> = d_act.iter().zip(&cache.fc).map(|(g, &x)| g * gelu_grad(x)).collect();
        let d_ln2 = linear_backward(
            &cache.ln2,
            model.p(&l.w_fc),
            &d_fc,
            seq_len,
            d,
            hd,
            grad,
            l.w_fc.start,
            Some(l.b_fc.start),
        );
        let d_from_ln2 = layer_norm_backward(
            &cache.h2,
            &cache.ln2_mean,
            &cache.ln2_rstd,
            model.p(&l.ln2_g),
            &d_ln2,
            d,
            grad,
            l.ln2_g.start,
            l.ln2_b.start,
        );
        let d_h2: Vec<f32> = d_h.iter().zip(&d_from_ln2).map(|(a, b)| a + b).collect();

        // Attention branch: h2 = h + W_o·attn(W_qkv·ln1(h)).
        let d_att = linear_backward(
            &cache.att,
            model.p(&l.w_attn_out),
            &d_h2,
            seq_len,
            d,
            d,
            grad,
            l.w_attn_out.start,
            Some(l.b_attn_out.start),
        );
        let d_qkv = attention_backward(&cache.qkv, &cache.probs, &d_att, seq_len, d, c.heads);
        let d_ln1 = linear_backward(
            &cache.ln1,
            model.p(&l.w_qkv),
            &d_qkv,
            seq_len,
            d,
            3 * d,
            grad,
            l.w_qkv.start,
            Some(l.b_qkv.start),
        );
        let d_from_ln1 = layer_norm_backward(
            &cache.input,
            &cache.ln1_mean,
            &cache.ln1_rstd,
            model.p(&l.ln1_g),
            &d_ln1,
            d,
            grad,
            l.ln1_g.start,
            l.ln1_b.start,
        );
        d_h = d_h2.iter().zip(&d_from_ln1).map(|(a, b)| a + b).collect();
    }

    for (t, &tok) in tokens.iter().enumerate() {
        let row = &d_h[t * d..(t + 1) * d];
        let te = lay.tok_emb.start + tok as usize * d;
        let pe = lay.pos_emb.start + t * d;
        for i in 0..d {
            grad[te + i] += row[i];
            grad[pe + i] += row[i];
        }
    }
    Ok(loss)
}

/// Backward of `out = inp · W + b`. Accumulates weight and bias gradients at
/// the given offsets of `grad`; returns the input gradient.
#[allow(clippy::too_many_arguments)]
fn linear_backward(
    inp: &[f32],
    w: &[f32],
    d_out: &[f32],
    rows: usize,
    n_in: usize,
    n_out: usize,
    grad: &mut [f32],
    w_at: usize,
    b_at: Option<usize>,
) -> Vec<f32> {
    let mut d_in = vec![0.0f32; rows * n_in];
    for r in 0..rows {
        let x = &inp[r * n_in..(r + 1) * n_in];
        let dy = &d_out[r * n_out..(r + 1) * n_out];
        if let Some(b) = b_at {
            for (g, &dv) in grad[b..b + n_out].iter_mut().zip(dy) {
                *g += dv;
            }
        }
        let dx = &mut d_in[r * n_in..(r + 1) * n_in];
        for i in 0..n_in {
            let wr = &w[i * n_out..(i + 1) * n_out];
            let gw = &mut grad[w_at + i * n_out..w_at + (i + 1) * n_out];
            let xi = x[i];
            let mut acc = 0.0;
            for j in 0..n_out {
                gw[j] += xi * dy[j];
                acc += wr[j] * dy[j];
            }
            dx[i] = acc;
        }
    }
    d_in
}

#[allow(clippy::too_many_arguments)]
fn layer_norm_backward(
    x: &[f32],
    means: &[f32],
    rstds: &[f32],
    g: &[f32],
    d_y: &[f32],
    d: usize,
    grad: &mut [f32],
    g_at: usize,
    b_at: usize,
) -> Vec<f32> {
    let rows = x.len() / d;
    let mut d_x = vec![0.0f32; x.len()];
    let mut xhat = vec![0.0f32; d];
    let mut dxhat = vec![0.0f32; d];
    for r in 0..rows {
        let (mean, rstd) = (means[r], rstds[r]);
        for i in 0..d {
            xhat[i] = (x[r * d + i] - mean) * rstd;
            let dy = d_y[r * d + i];
            grad[g_at + i] += dy * xhat[i];
            grad[b_at + i] += dy;
            dxhat[i] = dy * g[i];
        }
        let m1 = dxhat.iter().sum::<f32>() / d as f32;
        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / d as f32;
        for i in 0..d {
            d_x[r * d + i] = rstd * (dxhat[i] - m1 - xhat[i] * m2);
        }
    }
    d_x
}

fn attention_backward(qkv: &[f32], probs: &[f32], d_out: &[f32], seq_len: usize, d: usize, heads: usize) -> Vec<f32> {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let stride = 3 * d;
    let mut d_qkv = vec![0.0f32; qkv.len()];
    let mut d_p = vec![0.0f32; seq_len];
    for h in 0..heads {
        let (qo, ko, vo) = (h * hd, d + h * hd, 2 * d + h * hd);
        for t in 0..seq_len {
            let p = &probs[(h * seq_len + t) * seq_len..(h * seq_len + t + 1) * seq_len];
            let dy = &d_out[t * d + h * hd..t * d + (h + 1) * hd];
            for s in 0..=t {
                let vs = &qkv[s * stride + vo..s * stride + vo + hd];
                d_p[s] = dy.iter().zip(vs).map(|(a, b)| a * b).sum();
                for i in 0..hd {
                    d_qkv[s * stride + vo + i] += p[s] * dy[i];
                }
            }
            let dot: f32 = (0..=t).map(|s| p[s] * d_p[s]).sum();
            for s in 0..=t {
                let ds = p[s] * (d_p[s] - dot) * scale;
                for i in 0..hd {
                    let q = qkv[t * stride + qo + i];
                    let k = qkv[s * stride + ko + i];
                    d_qkv[t * stride + qo + i] += ds * k;
                    d_qkv[s * stride + ko + i] += ds * q;
                }
            }
        }
    }
    d_qkv
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seq_len: usize,
    pub learning_rate: f32,
    /// Linear warmup length in steps.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            batch: 16,
            seq_len: 64,
            learning_rate: 3e-3,
            warmup: 100,
            seed: 0,
        }
    }
}

/// Adam state over the flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Adam {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f32], grad: &[f32], lr: f32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        const EPS: f32 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// One optimizer step on a batch of windows. Returns the mean batch loss.
pub fn train_step(model: &mut ToyModel, opt: &mut Adam, batch: &[&[u32]], lr: f32) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    let mut grad = vec![0.0f32; model.params().len()];
    let weight = 1.0 / batch.len() as f32;
    let mut loss = 0.0;
    for seq in batch {
        loss += loss_and_grad(model, seq, weight, &mut grad)?;
    }
    loss /= batch.len() as f64;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged { step: opt.t as usize });
    }
    opt.step(model.params_mut(), &grad, lr);
    Ok(loss)
}

/// Trains on random windows of `corpus`, calling `on_step(step, loss)` after
/// every step. Returns the per-step losses.
pub fn train(
    model: &mut ToyModel,
    corpus: &[u32],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    let c = model.config();
    if cfg.seq_len < 2 || cfg.seq_len > c.max_seq_len {
        return Err(Error::BadSequenceLength {
            len: cfg.seq_len,
            max: c.max_seq_len,
        });
    }
    if corpus.len() < cfg.seq_len {
        return Err(Error::TooMany {
            requested: cfg.seq_len,
            available: corpus.len(),
        });
    }
    if cfg.batch == 0 {
        return Err(Error::Empty("training batch"));
    }
    let mut r = rng(cfg.seed);
    let mut opt = Adam::new(model.params().len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let windows: Vec<&[u32]> = (0..cfg.batch)
            .map(|_| {
                let start = r.random_range(0..=corpus.len() - cfg.seq_len);
                &corpus[start..start + cfg.seq_len]
            })
            .collect();
        let warm = if cfg.warmup == 0 {
            1.0
        } else {
            ((step + 1) as f32 / cfg.warmup as f32).min(1.0)
        };
        let loss = train_step(model, &mut opt, &windows, cfg.learning_rate * warm)?;
        on_step(step, loss);
        losses.push(loss);
    }
    Ok(losses)
}
