//! Dense `f64` tensors with a reverse-mode differentiation tape.
//!
//! The tape exposes fused operations (attention, layer normalization,
//! softmax cross-entropy, policy-gradient losses) whose backward rules are
//! written by hand and verified against finite differences.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod tape;
pub mod tensor;

pub use error::TensorError;
pub use gradcheck::{check_gradients, relative_error, GradCheckReport};
pub use tape::{AttnMask, CustomVjp, Tape, Var};
pub use tensor::Tensor;
