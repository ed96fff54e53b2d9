//! Implicit-field auto-decoder for unsupervised anomaly localization in
//! volumetric images.
//!
//! A coordinate network maps a per-volume latent code and an encoded 3D
//! position to a distribution over intensity classes. Training fits the
//! network and one latent code per healthy volume jointly. At test time the
//! network is frozen, a latent code is optimized to explain the test volume
//! (a *restoration*), and the per-voxel cross-entropy of the observed class
//! under that restoration is the anomaly score.
//!
//! The numerical core is generic over [`Scalar`] (`f32`/`f64`); the aliases
//! below fix the width for common use.

pub mod adam;
pub mod checkpoint;
pub mod coords;
pub mod encoding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mlp;
pub mod pipeline;
pub mod restore;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Mlp64 = mlp::MlpModel<f64>;
pub type Mlp32 = mlp::MlpModel<f32>;
pub type LatentTable64 = train::LatentTable<f64>;
pub type LatentTable32 = train::LatentTable<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type AnomalyMap64 = restore::AnomalyMap<f64>;
