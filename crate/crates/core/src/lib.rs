//! Decomposes layer-to-layer hidden-state updates of sequence models into an
//! input-conditioned tokenwise map and a residual, measures their geometry and
//! scores the residual's functional impact by resume-from-layer interventions.
//!
//! The crate is `no_std` (with `alloc`); file formats, the CLI and the
//! resume-service client live in the `layerlens` crate.

#![no_std]

extern crate alloc;

pub mod analysis;
pub mod error;
pub mod fit;
pub mod geometry;
pub mod intervene;
pub mod linalg;
pub mod neighborhood;
pub mod repr;
pub mod toy;

pub use error::{Error, Result};
