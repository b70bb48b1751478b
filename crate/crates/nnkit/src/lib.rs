//! Minimal differentiable building blocks for small convolutional models.
//!
//! Every op is a pair of plain functions (forward, backward) over [`Tensor`]s.
//! Models wire them together by hand and keep their own activations for the
//! backward pass. Everything is generic over [`Scalar`] so the same code runs
//! in `f32` for training and `f64` for gradient checks.

pub mod adam;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod init;
pub mod layer;
pub mod loss;
pub mod ops;
pub mod scalar;
pub mod tensor;

pub use adam::AdamState;
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use init::xavier_init;
pub use layer::{Activation, Layer, LayerGrads, LayerKind, LayerSpec};
pub use loss::{bce_loss, l1_loss};
pub use scalar::Scalar;
pub use tensor::Tensor;
