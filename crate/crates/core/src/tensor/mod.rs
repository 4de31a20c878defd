//! Dense tensors with a reverse-mode autodiff tape.

mod dense;
mod kernels;
mod ops;
mod scalar;
mod tape;

pub use dense::{broadcast_shapes, numel, Result, Tensor, TensorError};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};
