//! Tensors, reverse-mode differentiation and a finite-difference checker.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_gradients_sampled};
pub use tape::{Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
