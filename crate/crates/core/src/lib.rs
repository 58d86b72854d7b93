//! Referring image segmentation with vision-guided emphasis generation and
//! sentence-level emphasis calibration.
//!
//! The crate is `no_std` (with `alloc`): tensors, a reverse-mode tape,
//! the model layers, the synthetic shapes benchmark, metrics and the
//! training loop. File formats and the CLI live in the `fcnet` crate.

#![cfg_attr(not(any(test, feature = "std")), no_std)]
// `!(x > 0.0)` style checks are deliberate: NaN must fail them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod adam;
pub mod calibration;
pub mod checks;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod neck;
pub mod ops;
pub mod params;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod test_util;

pub use config::{Config, EcmVariant};
pub use error::{Error, Result};
pub use model::{FcNet, Prediction};
pub use tensor::Tensor;
