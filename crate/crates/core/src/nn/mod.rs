//! Minimal 3D convolutional network engine: tensors, convolution kernels,
//! tape-based reverse-mode differentiation, Adam, and weight checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod graph;
pub mod layers;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Graph, Var};
pub use params::{Adam, Grads, ParamId, ParamKind, ParamStore};
pub use tensor::Tensor;
