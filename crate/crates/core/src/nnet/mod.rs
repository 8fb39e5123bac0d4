//! Reverse-mode autodiff and the dual-branch regressor.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
mod params;
pub mod tape;
mod tensor;

pub use model::{Branch, DualBranchRegressor, ModelConfig, DEFAULT_FREEZE};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{backward, Gradients, Tape, Value};
pub use tensor::Tensor;
