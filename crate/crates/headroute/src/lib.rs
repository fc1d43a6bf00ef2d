//! File formats, checkpoints, benchmarks and the `headroute` command line
//! on top of `headroute-core`.

pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod json;
pub mod run;

pub use error::{Error, Result};
