//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use tape::{Tape, Var};
pub use tensor::{matmul_values, Tensor};
