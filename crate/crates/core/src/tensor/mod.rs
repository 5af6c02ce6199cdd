//! Dense `f64` tensors with a reverse-mode autodiff tape.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod value;

pub use gradcheck::{finite_diff_check, finite_diff_check_vars};
pub use tape::{Elementwise, Gradients, Tape, Var};
pub use value::Tensor;
