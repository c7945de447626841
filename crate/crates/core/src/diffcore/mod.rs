//! Minimal reverse-mode differentiation over dense `f64` tensors.

mod gradcheck;
mod kernels;
pub mod linalg;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, check_gradients, relative_error, GradCheckReport};
pub use tape::{CustomVjp, Tape, Var};
pub use tensor::Tensor;
