//! Minimal dense-tensor reverse-mode autodiff.

mod conv;
mod gradcheck;
mod ops;
mod tape;

pub use gradcheck::{finite_difference_grad, finite_difference_scalar, max_relative_error};
pub use ops::{sigmoid, Elementwise};
pub use tape::{Gradients, Tape, Var};
