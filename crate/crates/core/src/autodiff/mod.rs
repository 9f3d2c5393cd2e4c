//! Dense `f64` tensors and a tape-style reverse-mode differentiation graph.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;
