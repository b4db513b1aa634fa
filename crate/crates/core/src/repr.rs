//! In-memory model of layer-transition representation pairs.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DMatrix;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One token's hidden state before (`h_in`) and after (`h_out`) a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ReprPair {
    pub seq_id: u32,
    pub pos: u32,
    pub token_id: u32,
    pub h_in: Vec<f32>,
    pub h_out: Vec<f32>,
}

/// All pairs collected for the transition `layer_index → layer_index + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDataset {
    layer_index: u32,
    dim: usize,
    split: Split,
    pairs: Vec<ReprPair>,
}

impl LayerDataset {
    /// Validates and wraps a pair list. Pairs must be nonempty, share `dim`,
    /// be finite, and have unique `(seq_id, pos)` keys.
    pub fn new(layer_index: u32, dim: usize, split: Split, pairs: Vec<ReprPair>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("layer dataset"));
        }
        if dim == 0 {
            return Err(Error::Empty("hidden dimension"));
        }
        let mut seen = BTreeSet::new();
        for p in &pairs {
            for v in [&p.h_in, &p.h_out] {
                if v.len() != dim {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("representation pair"));
                }
            }
            if !seen.insert((p.seq_id, p.pos)) {
                return Err(Error::DuplicatePair {
                    seq_id: p.seq_id,
                    pos: p.pos,
                });
            }
        }
        Ok(LayerDataset {
            layer_index,
            dim,
            split,
            pairs,
        })
    }

    pub fn layer_index(&self) -> u32 {
        self.layer_index
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn pairs(&self) -> &[ReprPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn into_pairs(self) -> Vec<ReprPair> {
        self.pairs
    }

    pub fn check_positions(&self, seq_len: usize) -> Result<()> {
        match self.pairs.iter().find(|p| p.pos as usize >= seq_len) {
            Some(p) => Err(Error::PositionOutOfRange { pos: p.pos, seq_len }),
            None => Ok(()),
        }
    }

    /// `h_in` rows as an `n × d` matrix.
    pub fn inputs(&self) -> DMatrix<f64> {
        self.matrix(|p| &p.h_in)
    }

    /// `h_out` rows as an `n × d` matrix.
    pub fn targets(&self) -> DMatrix<f64> {
        self.matrix(|p| &p.h_out)
    }

    /// Row-major `h_in` payload in f64, the layout `NeighborIndex` expects.
    pub fn inputs_flat(&self) -> Vec<f64> {
        self.pairs
            .iter()
            .flat_map(|p| p.h_in.iter().map(|&x| f64::from(x)))
            .collect()
    }

    fn matrix(&self, pick: impl Fn(&ReprPair) -> &Vec<f32>) -> DMatrix<f64> {
        DMatrix::from_fn(self.pairs.len(), self.dim, |i, j| f64::from(pick(&self.pairs[i])[j]))
    }
}

/// Mixes a base seed with a salt (e.g. a sequence id) into an independent seed.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws `n` distinct valid positions uniformly without replacement.
///
/// `valid_mask` may be shorter than `seq_len`; missing entries count as
/// invalid. The result is sorted ascending.
pub fn sample_positions(seq_len: usize, valid_mask: &[bool], n: usize, seed: u64) -> Result<Vec<u32>> {
    let valid: Vec<u32> = valid_mask
        .iter()
        .take(seq_len)
        .enumerate()
        .filter(|(_, &ok)| ok)
        .map(|(i, _)| i as u32)
        .collect();
    if n > valid.len() {
        return Err(Error::TooMany {
            requested: n,
            available: valid.len(),
        });
    }
    let mut picked: Vec<u32> = index::sample(&mut rng(seed), valid.len(), n)
        .into_iter()
        .map(|i| valid[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn pair(seq_id: u32, pos: u32, h_in: Vec<f32>, h_out: Vec<f32>) -> ReprPair {
        ReprPair {
            seq_id,
            pos,
            token_id: 0,
            h_in,
            h_out,
        }
    }

    #[test]
    fn rejects_empty_and_bad_pairs() {
        assert_eq!(
            LayerDataset::new(0, 2, Split::Train, vec![]),
            Err(Error::Empty("layer dataset"))
        );
        let bad_dim = vec![pair(0, 0, vec![1.0], vec![1.0, 2.0])];
        assert!(matches!(
            LayerDataset::new(0, 2, Split::Train, bad_dim),
            Err(Error::DimensionMismatch { .. })
        ));
        let nan = vec![pair(0, 0, vec![1.0, f32::NAN], vec![1.0, 2.0])];
        assert!(matches!(
            LayerDataset::new(0, 2, Split::Train, nan),
            Err(Error::NonFinite(_))
        ));
        let dup = vec![
            pair(3, 1, vec![1.0, 0.0], vec![0.0, 1.0]),
            pair(3, 1, vec![1.0, 1.0], vec![0.0, 1.0]),
        ];
        assert_eq!(
            LayerDataset::new(0, 2, Split::Train, dup),
            Err(Error::DuplicatePair { seq_id: 3, pos: 1 })
        );
    }

    #[test]
    fn position_bound() {
        let ds = LayerDataset::new(0, 1, Split::Test, vec![pair(0, 5, vec![1.0], vec![1.0])]).unwrap();
        assert!(ds.check_positions(6).is_ok());
        assert!(ds.check_positions(5).is_err());
    }

    #[test]
    fn sample_positions_edge_cases() {
        let all = vec![true; 10];
        assert_eq!(
            sample_positions(10, &all, 10, 1).unwrap(),
            (0..10).collect::<Vec<u32>>()
        );
        let mask = [false, true, false, true, true, false];
        assert_eq!(sample_positions(6, &mask, 3, 9).unwrap(), vec![1, 3, 4]);
        assert!(matches!(
            sample_positions(6, &mask, 4, 9),
            Err(Error::TooMany {
                requested: 4,
                available: 3
            })
        ));
    }

    #[test]
    fn sample_positions_is_seed_deterministic() {
        let mask = vec![true; 192];
        let a = sample_positions(192, &mask, 8, 42).unwrap();
        let b = sample_positions(192, &mask, 8, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }
}
