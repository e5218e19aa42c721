//! Adaptive cross-layer integration networks.
//!
//! Each layer of an AILA network attends over the outputs of every earlier
//! layer, either through learned linear projections scored per head
//! (Architecture 1) or through query/key/value dot-product attention
//! (Architecture 2). The crate bundles the pieces needed to train and
//! study such networks on a CPU:
//!
//! - [`autodiff`]: a tape-based reverse-mode engine over [`Tensor`]s,
//! - [`layers`]: the two integrators and the per-layer update,
//! - [`model`]: full networks, fixed-skip baselines and checkpoints,
//! - [`train`]: losses, Adam, early stopping and run reports,
//! - [`data`]: CSV series, synthetic tasks and batching,
//! - [`ablation`]: variant, head, depth and knockout studies,
//! - [`gradcheck`]: finite-difference verification.

pub mod ablation;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{param_seed, BoundParams, ParamStore};
pub use tensor::Tensor;
