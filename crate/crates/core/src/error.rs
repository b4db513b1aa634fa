use alloc::string::String;

use thiserror::Error;

use crate::fit::MapClass;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("duplicate pair (seq_id {seq_id}, pos {pos})")]
    DuplicatePair { seq_id: u32, pos: u32 },

    #[error("position {pos} out of range for sequence length {seq_len}")]
    PositionOutOfRange { pos: u32, seq_len: usize },

    #[error("requested {requested} items but only {available} available")]
    TooMany { requested: usize, available: usize },

    #[error("zero query vector")]
    ZeroQuery,

    #[error("{op} does not support map class {class}")]
    UnsupportedClass { op: &'static str, class: MapClass },

    #[error("no map assigned to position {pos} of sequence {seq_id}")]
    MissingMap { seq_id: u32, pos: u32 },

    #[error("unknown sequence {seq_id}")]
    UnknownSequence { seq_id: u32 },

    #[error("fit diverged at step {step}")]
    Diverged { step: usize },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence length {len} outside 1..={max}")]
    BadSequenceLength { len: usize, max: usize },

    #[error("layer {layer} out of range (max {max})")]
    LayerOutOfRange { layer: usize, max: usize },

    #[error("distribution not normalized (mass {mass})")]
    NotNormalized { mass: f64 },

    #[error("resume backend failed: {0}")]
    Backend(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
