//! Dense tensors, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_piecewise, finite_diff_check_with_floor, FdReport};
pub use ops::{gelu, gelu_with, l2_normalize, l2_normalize_rows, matmul, sigmoid, softmax_rows, GeluMode};
pub use tape::{grad, Grads, Tape, Var};
pub use tensor::Tensor;
