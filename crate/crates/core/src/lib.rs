//! Forward inference for a dynamic-convolution, wavelet-enhanced U-shaped
//! segmentation network, together with the supporting pieces needed to use
//! it end to end: atmospheric fog synthesis, binary segmentation metrics and
//! an analytic parameter/FLOP counter.
//!
//! Everything is single-precision and inference-only. Heavy loops fan out
//! over rayon when the `parallel` feature (on by default) is enabled.

pub mod abc;
pub mod complexity;
pub mod dynamic_conv;
pub mod error;
pub mod fog;
pub mod imageio;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod parallel;
pub mod selftest;
pub mod tensor;
pub mod wavelet;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
