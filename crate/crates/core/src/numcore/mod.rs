//! Dense tensors with reverse-mode differentiation over the op set the
//! models need: matmul, 2-D convolution, normalization, attention and a few
//! pointwise functions.

mod graph;
mod param;
mod scalar;
mod tensor;

pub mod gradcheck;
pub mod nn;

pub use graph::{Conv2dSpec, Gradients, Graph, Var};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
