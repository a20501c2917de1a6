//! Dense `f64` tensors, the few kernels the model needs with hand-written
//! adjoints, a named parameter store with Adam, a finite-difference
//! gradient checker and a binary checkpoint format.

pub mod checkpoint;
pub mod gradcheck;
pub mod ops;
pub mod store;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::*;
pub use store::{adam_step, adam_step_except, AdamConfig, ParameterStore};
pub use tensor::{dot, norm, Tensor};

/// Standard deviation for weight-matrix and mask-token initialization.
pub const INIT_STD: f64 = 0.02;
