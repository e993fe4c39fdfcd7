//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{logsumexp_slice, Graph, NodeId};
#[cfg(test)]
pub(crate) use graph::{sigmoid, softmax_in_place};
pub use tensor::Tensor;
