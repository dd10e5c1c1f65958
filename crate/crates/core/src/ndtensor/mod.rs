//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Values are recorded on a [`Tape`] in execution order and referenced by
//! [`Var`] handles. Gradients accumulate across [`Tape::backward`] calls until
//! [`Tape::zero_grad`].

mod kernels;
mod tape;
mod tensor;

pub use kernels::ConvSpec;
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

pub(crate) use kernels::{bilinear_plane, bilinear_taps, maxpool_plane};
