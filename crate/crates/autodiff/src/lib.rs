//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records each op as it runs. After computing a scalar loss,
//! [`Graph::backward`] returns [`Gradients`] for every tracked node. All ops
//! reject non-finite results instead of propagating them.
//!
//! Ops run single-threaded with a fixed reduction order, so identical inputs
//! give bit-identical values and gradients.

mod conv;
mod error;
pub mod gemm;
pub mod gradcheck;
mod graph;
mod tensor;

pub use error::TensorError;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use tensor::Tensor;
