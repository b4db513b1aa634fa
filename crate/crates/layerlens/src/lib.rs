//! File formats, resume-service client and the end-to-end pipeline around
//! [`layerlens_core`].

pub mod checkpoint;
pub mod client;
pub mod config;
pub mod corpus;
pub mod error;
pub mod mapfile;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod store;

pub use error::{ClientError, LensError, Result};
