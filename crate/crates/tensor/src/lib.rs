//! Dense tensors with a reverse-mode gradient tape.
//!
//! The engine is deliberately small: row-major storage, explicit shapes, and
//! only the primitives a 3D encoder/decoder with attention needs. `f32` is the
//! training precision; `f64` exists for finite-difference verification.

pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod scalar;
pub mod suite;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{central_difference, finite_diff_check, relative_error, FiniteDiff, GradCheckReport};
pub use scalar::Scalar;
pub use suite::{primitive_sweep, PrimitiveResult};
pub use tape::{Tape, Var, PRIMITIVES};
pub use tensor::Tensor;

/// Negative slope used for every LeakyReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Stability constant shared by layer and instance normalization.
pub const NORM_EPS: f64 = 1e-5;
