//! Reverse-mode differentiation over dense arrays, generic over the element
//! type, together with the differentiable primitives the models are built
//! from: linear algebra, convolution, bilinear sampling and the 3×3 matrix
//! exponential.

mod conv;
pub mod gradcheck;
mod graph;
mod linalg;
mod ops;
mod sample;
mod scalar;
mod tensor;

#[cfg(test)]
mod tests;

pub use graph::{Gradients, Graph, Var};
pub use linalg::{matexp, squaring_count, TAYLOR_TERMS};
pub use scalar::{sigmoid, softplus, Scalar};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NumericsError {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
}
