//! Dense tensors, the recording tape, and finite-difference checking.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{dot, l2_distance, l2_norm, softmax_slice, Tensor};
