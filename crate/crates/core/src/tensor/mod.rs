//! Dense tensors and a tape-based reverse-mode autodiff engine.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod value;

pub use gradcheck::{grad_check, rel_err, GradCheck, ScalarFn, REL_ERR_FLOOR};
pub use tape::{Gradients, Tape, Var};
pub use value::{Real, Tensor};
