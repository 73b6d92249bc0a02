//! Dense tensors, a reverse-mode tape and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{softmax_rows, Elementwise, Gradients, Tape, Var};
pub use tensor::Tensor;
