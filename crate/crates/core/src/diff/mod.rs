//! Minimal reverse-mode differentiation: tensors, a define-by-run graph, the
//! operations the flow model needs, parameters, Adam and checkpoints.

pub mod check;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{charbonnier, charbonnier_grad, sigmoid, Graph, Var};
pub use params::{read_checkpoint, write_checkpoint, Adam, AdamConfig, Bound, ParamId, ParamStore};
pub use tensor::Tensor;
