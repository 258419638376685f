//! Minimal reverse-mode autodiff engine for small dense models.
//!
//! The design is a flat-buffer Wengert tape: tensors are shape + flat data,
//! every differentiable operation appends one node, and `backward` replays
//! the node list in reverse. The engine is generic over the scalar type so
//! the same model code runs in f32 for training and in f64 for
//! finite-difference gradient verification.

mod adam;
mod error;
mod gaussian;
mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use error::{NumError, Result};
pub use gaussian::{GaussianParams, LOGVAR_MAX, LOGVAR_MIN};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use scalar::Scalar;
pub use tape::{Gradients, PrimOp, Tape};
pub use tensor::{Parameter, Tensor};
