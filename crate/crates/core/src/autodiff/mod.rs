//! Minimal reverse-mode differentiable tensor engine.

pub mod counter;
mod gradcheck;
mod graph;
pub mod kernels;
mod mask;
mod params;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{AttnBlock, Gradients, Graph, Var};
pub use mask::AttentionMask;
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{DType, Float, Tensor};
