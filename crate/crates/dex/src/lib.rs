//! Run configuration, checkpoint and metrics formats, analysis reports and
//! the `dex` command line on top of [`dex_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod metrics;
pub mod report;
pub mod run;
pub mod samples;

pub use error::{Error, Result};
