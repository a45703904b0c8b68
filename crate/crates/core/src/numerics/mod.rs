//! Dense tensors, reverse-mode autodiff, Adam, and the tensor blob format.

pub mod blob;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, GRAD_CHECK_FLOOR};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::ParamSet;
pub use tape::{Gradients, Tape, Var, IGNORE_INDEX};
pub use tensor::{Scalar, Tensor};
