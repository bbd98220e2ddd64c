//! Error type shared by the core domain modules.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("manifest parse error: {0}")]
    ManifestParse(#[from] serde_json::Error),

    #[error("sample {id}: dimension mismatch for {what}: expected {expected_w}x{expected_h}, got {actual_w}x{actual_h}")]
    DimensionMismatch {
        id: String,
        what: String,
        expected_w: usize,
        expected_h: usize,
        actual_w: usize,
        actual_h: usize,
    },

    #[error("dimension mismatch: {what} ({left_w}x{left_h} vs {right_w}x{right_h})")]
    ShapeMismatch {
        what: String,
        left_w: usize,
        left_h: usize,
        right_w: usize,
        right_h: usize,
    },

    #[error("sample {id}: referenced file missing: {path}")]
    MissingFile { id: String, path: PathBuf },

    #[error("sample {id}: unknown provenance tag {value:?}")]
    UnknownProvenance { id: String, value: String },

    #[error("sample {id}: unknown split tag {value:?}")]
    UnknownSplit { id: String, value: String },

    #[error("duplicate sample id {id}")]
    DuplicateId { id: String },

    #[error("sample {id}: {message}")]
    InvalidSample { id: String, message: String },

    #[error("object id sets differ across splits: {details}")]
    ObjectSetMismatch { details: String },

    #[error("empty mask")]
    EmptyMask,

    #[error("normal force {fz} N outside [{min}, {max}] N")]
    ForceOutOfRange { fz: f64, min: f64, max: f64 },

    #[error("inconsistent label: non-zero force with empty contact mask")]
    InconsistentContact,

    #[error("mask transform invalid: {0}")]
    InvalidTransform(String),

    #[error("transformed contact center ({cx:.1}, {cy:.1}) falls outside the {w}x{h} frame")]
    PoseOffFrame { cx: f64, cy: f64, w: usize, h: usize },

    #[error("image {w}x{h} smaller than the {win}x{win} metric window")]
    ImageTooSmall { w: usize, h: usize, win: usize },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;
