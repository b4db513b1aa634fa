//! Exact cosine-similarity nearest neighbors over representation vectors.

use alloc::vec::Vec;
use core::cmp::Ordering;

use rand::seq::index;

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, ZERO_NORM};
use crate::repr::rng;

/// Brute-force cosine k-NN index. Keys are stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    dim: usize,
    keys: Vec<f64>,
    norms: Vec<f64>,
    zero_keys: Vec<usize>,
}

/// The `k` most similar keys to a query, most similar first.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhood {
    /// Dataset index of the anchor this neighborhood was built around, if any.
    pub anchor_index: Option<usize>,
    pub member_indices: Vec<usize>,
    pub similarities: Vec<f64>,
}

/// Builds an index over `n` row-major vectors of length `dim`.
///
/// Zero vectors are kept (indices stay aligned with the input) but are
/// flagged and never returned by queries.
pub fn build_index(vectors: &[f64], dim: usize) -> Result<NeighborIndex> {
    if dim == 0 || vectors.is_empty() {
        return Err(Error::Empty("neighbor index"));
    }
    if !vectors.len().is_multiple_of(dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: vectors.len() % dim,
        });
    }
    let norms: Vec<f64> = vectors.chunks_exact(dim).map(norm).collect();
    let zero_keys = norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n < ZERO_NORM)
        .map(|(i, _)| i)
        .collect();
    Ok(NeighborIndex {
        dim,
        keys: vectors.to_vec(),
        norms,
        zero_keys,
    })
}

impl NeighborIndex {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.norms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norms.is_empty()
    }

    /// Keys that can be returned by a query (nonzero norm).
    pub fn usable_len(&self) -> usize {
        self.len() - self.zero_keys.len()
    }

    pub fn zero_keys(&self) -> &[usize] {
        &self.zero_keys
    }

    pub fn key(&self, i: usize) -> &[f64] {
        &self.keys[i * self.dim..(i + 1) * self.dim]
    }

    pub fn norm(&self, i: usize) -> f64 {
        self.norms[i]
    }

    /// Exact top-`k` by cosine similarity; ties go to the lower index.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Neighborhood> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k > self.usable_len() {
            return Err(Error::TooMany {
                requested: k,
                available: self.usable_len(),
            });
        }
        let qn = norm(query);
        if qn < ZERO_NORM {
            return Err(Error::ZeroQuery);
        }
        let mut scored: Vec<(f64, usize)> = (0..self.len())
            .filter(|&i| self.norms[i] >= ZERO_NORM)
            .map(|i| (dot(self.key(i), query) / (self.norms[i] * qn), i))
            .collect();
        if k > 0 && k < scored.len() {
            scored.select_nth_unstable_by(k - 1, rank_order);
            scored.truncate(k);
        }
        scored.sort_unstable_by(rank_order);
        scored.truncate(k);
        Ok(Neighborhood {
            anchor_index: None,
            member_indices: scored.iter().map(|&(_, i)| i).collect(),
            similarities: scored.iter().map(|&(s, _)| s).collect(),
        })
    }

    /// Neighborhood of an indexed key, recorded as its anchor. The anchor
    /// itself is always a member since its self-similarity is maximal.
    pub fn knn_of_key(&self, anchor: usize, k: usize) -> Result<Neighborhood> {
        if anchor >= self.len() {
            return Err(Error::TooMany {
                requested: anchor + 1,
                available: self.len(),
            });
        }
        let mut hood = self.knn(self.key(anchor), k)?;
        // Exact duplicates of the anchor tie with it at similarity 1; keep the
        // anchor in the set regardless of index order.
        if k > 0 && !hood.member_indices.contains(&anchor) {
            let last = hood.member_indices.len() - 1;
            hood.member_indices[last] = anchor;
            hood.similarities[last] = 1.0;
            let mut zipped: Vec<(f64, usize)> = hood
                .similarities
                .iter()
                .copied()
                .zip(hood.member_indices.iter().copied())
                .collect();
            zipped.sort_unstable_by(rank_order);
            hood.similarities = zipped.iter().map(|&(s, _)| s).collect();
            hood.member_indices = zipped.iter().map(|&(_, i)| i).collect();
        }
        hood.anchor_index = Some(anchor);
        Ok(hood)
    }
}

fn rank_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// `m` distinct indices out of `n`, uniform without replacement, sorted.
pub fn select_anchors(n: usize, m: usize, seed: u64) -> Result<Vec<usize>> {
    if m > n {
        return Err(Error::TooMany {
            requested: m,
            available: n,
        });
    }
    let mut picked = index::sample(&mut rng(seed), n, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
