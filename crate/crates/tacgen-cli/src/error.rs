//! CLI failure taxonomy. Config problems (bad file, unknown key, bad value)
//! exit with 3 and name the offending key path; everything that goes wrong
//! while running exits with 1. Argument parsing is left to clap, which
//! exits with 2 on its own.

use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {path}: {message}")]
    Config { path: String, message: String },
    #[error("run: {message}")]
    Run { message: String },
}

impl CliError {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> CliError {
        CliError::Config { path: path.into(), message: message.into() }
    }

    pub fn run(message: impl Into<String>) -> CliError {
        CliError::Run { message: message.into() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 3,
            CliError::Run { .. } => 1,
        }
    }

    /// One-line rendering; newlines in wrapped messages are flattened so the
    /// output stays machine-parsable.
    pub fn render(&self) -> String {
        format!("error: {}", self.to_string().replace('\n', "; "))
    }
}

pub fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::run(format!("{}: {e}", path.display()))
}

macro_rules! from_run {
    ($t:ty) => {
        impl From<$t> for CliError {
            fn from(e: $t) -> CliError {
                CliError::run(e.to_string())
            }
        }
    };
}

from_run!(tacgen_core::CoreError);
from_run!(tacgen_diffusion::DiffusionError);
from_run!(tacgen_tasks::TaskError);
from_run!(tacgen_nn::StoreError);

pub type Result<T> = std::result::Result<T, CliError>;
