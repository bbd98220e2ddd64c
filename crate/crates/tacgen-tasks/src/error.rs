use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] tacgen_core::CoreError),
    #[error(transparent)]
    Store(#[from] tacgen_nn::StoreError),
    #[error(transparent)]
    Diffusion(#[from] tacgen_diffusion::DiffusionError),
    #[error("transform grid holds {grid} points, cannot draw {requested} without replacement")]
    GridTooSmall { grid: usize, requested: usize },
    #[error("sample {id} not found in manifest")]
    NoSuchSample { id: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("dataset needs at least 2 classes, found {found}")]
    TooFewClasses { found: usize },
    #[error("weights are for task {actual}, expected {expected}")]
    TaskMismatch { expected: &'static str, actual: String },
    #[error("image is {actual_h}x{actual_w}, estimator expects {h}x{w}")]
    InputShape { h: usize, w: usize, actual_h: usize, actual_w: usize },
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TaskError>;
