//! File formats, checkpoints, the training driver and the ablation harness
//! around `fcnet-core`.

pub mod ablation;
pub mod checkpoint;
pub mod configfile;
pub mod dataset;
pub mod driver;
pub mod error;
pub mod manifest;
pub mod pnm;
pub mod tables;

pub use error::FormatError;
