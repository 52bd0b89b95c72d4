//! Dense tensors and reverse-mode differentiation.

mod graph;
#[allow(clippy::module_inception)]
mod tensor;

pub use graph::{Gradients, Graph, Primitive, Var, Vjp};
pub use tensor::Tensor;
