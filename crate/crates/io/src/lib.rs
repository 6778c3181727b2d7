//! File formats, datasets and the command line around `comma-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod report;
pub mod vvol;

pub use error::{IoError, Result};
