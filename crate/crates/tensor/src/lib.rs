//! Dense `f64` tensors and a dynamic reverse-mode tape.
//!
//! The tape is rebuilt on every forward pass. Operations record their
//! output on the [`Tape`] and return a [`Var`] handle; [`Tape::backward`]
//! consumes the tape and yields [`Gradients`] for every leaf that asked for
//! them. [`finite_difference_check`] is the independent oracle used to
//! verify every adjoint.

mod error;
pub mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_check, op_suite, GradCheck, GradCheckError, OpCheck};
pub use tape::{GradientMap, Gradients, OpKind, ParamId, Tape, Var, NORM_FLOOR};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    tape::sigmoid(x)
}
