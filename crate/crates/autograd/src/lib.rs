//! Reverse-mode automatic differentiation over dense CPU tensors.
//!
//! The op set is deliberately coarse: fused multi-head attention, adaLN
//! modulation and layer norm are single nodes with hand-written backward
//! rules, and all matrix products go through strided GEMM so transposes and
//! head splits never copy.

mod graph;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use real::{gemm, Layout, Real};
pub use tensor::Tensor;
