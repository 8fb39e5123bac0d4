//! Image-based facial rig inversion.
//!
//! The crate covers the whole desk-scale pipeline:
//!
//! - [`rig`]: a linear, differentiable blendshape rig with OBJ/JSON I/O.
//! - [`render`]: a deterministic CPU rasterizer producing a lit appearance
//!   image and an RGB-encoded tangent-space normal map.
//! - [`datagen`]: parameter-set synthesis, perturbation, rigid augmentation
//!   and the on-disk dataset layout.
//! - [`nnet`]: a tape-based reverse-mode autodiff engine and a dual-branch
//!   hierarchical transformer regressor.
//! - [`train`]: the two-term loss, AdamW, the training loop, evaluation and a
//!   direct gradient-fit baseline.
//!
//! Numeric code is generic over [`Scalar`] (`f32` and `f64`). The aliases
//! below fix the precisions the pipeline uses by default: geometry in `f64`,
//! training in `f32`, gradient checks in `f64`.

pub mod datagen;
pub mod error;
pub mod geom;
pub mod nnet;
pub mod render;
pub mod rig;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Number of rig controls predicted and decoded by the pipeline.
pub const NUM_CONTROLS: usize = 102;

pub type Rig = rig::BlendRig<f64>;
pub type Mesh = rig::TriMesh<f64>;
pub type Params = rig::RigParams<f64>;
pub type Rigid = rig::RigidTransform<f64>;
pub type Regressor = nnet::DualBranchRegressor<f32>;
pub type Regressor64 = nnet::DualBranchRegressor<f64>;
