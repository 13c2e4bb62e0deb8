//! Minimal dense-tensor math with reverse-mode automatic differentiation.

pub mod adam;
pub mod gradcheck;
pub mod graph;
pub mod store;
#[allow(clippy::module_inception)]
pub mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use graph::{Graph, Mode, NodeId};
pub use store::{fan_in_uniform, ParamId, ParamStore};
pub use tensor::{Real, Tensor, TensorError, TensorResult};
