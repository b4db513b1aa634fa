//! Constrained tokenwise maps `T(x) = A(x) x` fitted per neighborhood.

mod linear;
mod local;
mod map;
mod mlp;

pub use linear::{fit_diag_psd, fit_global_diag, fit_low_rank, fit_orthogonal, Ridge};
pub use local::{fit_anchor, fit_class, fit_local, interpolate_maps, interpolation_weights, FitConfig};
pub use map::{Activation, MapClass, MapParams, MlpParams, TokenwiseMap};
pub use mlp::{fit_mlp, init_mlp, mlp_loss, MlpConfig};
