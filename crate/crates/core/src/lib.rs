//! Weighted causal multihead attention for patch-based time-series forecasting.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode tape and Adam.
//! - [`masks`]: causal and decay masks (power laws, digital Butterworth).
//! - [`attention`]: multihead attention with additive masks, plus a banded kernel.
//! - [`patching`]: instance normalization and strided patch embedding.
//! - [`model`]: the encoder-only forecaster, metrics and checkpoints.
//! - [`data`]: CSV ingestion, splits, windows, autocorrelation and synthetic series.
//! - [`training`]: training loop, learnable decay constant and the evaluation protocol.
//! - [`analysis`]: attention score/weight histograms and envelope checks.
//! - [`cli`]: config files, run manifests and the subcommands behind the binary.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod data;
pub mod error;
pub mod masks;
pub mod model;
pub mod patching;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
