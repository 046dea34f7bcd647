//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.

mod adam;
mod graph;
mod tensor;

pub use adam::{Adam, AdamState};
pub use graph::{Gradients, Graph, Node, NodeId, Op};
pub use tensor::Tensor;



pub mod gradcheck;
