//! A small byte-level decoder that stands in for a pretrained language model.

pub(crate) mod model;
mod train;

pub use model::{ForwardPass, ToyConfig, ToyModel};
pub use train::{sequence_loss, train, train_step, Adam, TrainConfig};

use alloc::vec::Vec;

use crate::error::Result;
use crate::repr::{LayerDataset, ReprPair, Split};

/// Builds the `(h_ℓ, h_{ℓ+1})` datasets for every layer from the given
/// sequences and per-sequence positions.
pub fn extract_pairs(
    model: &ToyModel,
    sequences: &[(u32, Vec<u32>)],
    positions: &[Vec<usize>],
    split: Split,
) -> Result<Vec<LayerDataset>> {
    let c = model.config();
    let d = c.dim;
    let mut per_layer: Vec<Vec<ReprPair>> = (0..c.num_layers).map(|_| Vec::new()).collect();
    for ((seq_id, tokens), pos) in sequences.iter().zip(positions) {
        let pass = model.forward(tokens)?;
        for &p in pos {
            if p >= tokens.len() {
                return Err(crate::error::Error::PositionOutOfRange {
                    pos: p as u32,
                    seq_len: tokens.len(),
                });
            }
            for (l, pairs) in per_layer.iter_mut().enumerate() {
                pairs.push(ReprPair {
                    seq_id: *seq_id,
                    pos: p as u32,
                    token_id: tokens[p],
                    h_in: pass.hidden[l][p * d..(p + 1) * d].to_vec(),
                    h_out: pass.hidden[l + 1][p * d..(p + 1) * d].to_vec(),
                });
            }
        }
    }
    per_layer
        .into_iter()
        .enumerate()
        .map(|(l, pairs)| LayerDataset::new(l as u32, d, split, pairs))
        .collect()
}
