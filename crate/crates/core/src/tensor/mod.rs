//! Dense `f64` tensors with a small reverse-mode tape.
//!
//! Everything the forecaster needs is expressed through [`Tape`] operations;
//! free functions such as [`matmul`] and [`softmax_lastdim`] run the same
//! kernels without recording anything.

mod adam;
mod dense;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use dense::{layer_norm, matmul, softmax_lastdim, Tensor, MASK_THRESHOLD};
pub use tape::{CustomBackward, Tape, Var};

pub(crate) use dense::kernels;
