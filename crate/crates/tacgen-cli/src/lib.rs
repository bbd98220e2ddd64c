//! Library half of the `tacgen` binary: config loading with dotted-path
//! overrides, run-directory layout, shared stage implementations, generation
//! benchmarks, and the scripted experiments. The binary is a thin clap
//! wrapper over these modules; integration tests drive them directly.

pub mod bench;
pub mod config;
pub mod error;
pub mod experiments;
pub mod pipeline;
pub mod rundir;

pub use error::{CliError, Result};
