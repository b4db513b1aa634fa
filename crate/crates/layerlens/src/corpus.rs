//! Bundled public-domain text, tokenized as raw bytes.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LensError, Result};

pub const CORPUS: &str = include_str!("../assets/corpus.txt");

pub fn tokens() -> Vec<u32> {
    CORPUS.bytes().map(u32::from).collect()
}

/// Draws `count` distinct non-overlapping windows of `seq_len` tokens from
/// `tokens`, in draw order. Deterministic in `seed`.
pub fn windows(tokens: &[u32], seq_len: usize, count: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if seq_len == 0 {
        return Err(LensError::Config("sequence length must be positive".into()));
    }
    let available = tokens.len() / seq_len;
    if count > available {
        return Err(LensError::Config(format!(
            "requested {count} sequences of length {seq_len} but the corpus holds only {available}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample(&mut rng, available, count)
        .into_iter()
        .map(|w| tokens[w * seq_len..(w + 1) * seq_len].to_vec())
        .collect())
}
