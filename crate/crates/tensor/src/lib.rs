//! Minimal dense tensors with a reverse-mode gradient tape.
//!
//! Everything the reconstruction models need lives here: a row-major
//! [`Tensor`], the [`Tape`] that records differentiable operations, dilated
//! "same" convolution backed by im2col + GEMM, segment-level gradient
//! checkpointing, a central finite-difference oracle and the `NODT` binary
//! tensor format.
//!
//! The tape is generic over the element type so that gradient checks can
//! re-run the exact same forward code in `f64`. Training uses `f32`.

mod conv;
mod error;
pub mod gradcheck;
pub mod io;
pub mod memory;
mod ops;
mod real;
mod tape;
mod tensor;

pub use conv::ConvParams;
pub use error::{Result, TensorError};
pub use real::Real;
pub use tape::{BackwardCtx, Grads, Tape, Var};
pub use tensor::Tensor;
