//! File formats, checkpoints, run configuration and the command
//! implementations behind the `batformer` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod raster;
pub mod report;

pub use batformer_core as core;
pub use error::{Error, Result};
