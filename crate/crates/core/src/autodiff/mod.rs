//! Dense `f64` tensors and tape-based reverse-mode differentiation.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use tape::{gelu, gelu_derivative, Gradients, Tape, Var, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use tensor::Tensor;

/// Label id reserved for positions that contribute nothing to the loss.
pub const IGNORE_INDEX: usize = usize::MAX;
