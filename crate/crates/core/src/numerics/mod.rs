//! Dense tensors and a reverse-mode differentiation tape.

mod graph;
mod tensor;

pub use graph::{Graph, NodeId, PROB_FLOOR};
pub use tensor::Tensor;

pub(crate) use tensor::{argmax, dot, sigmoid};
