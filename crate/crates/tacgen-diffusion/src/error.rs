use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Core(#[from] tacgen_core::CoreError),

    #[error(transparent)]
    Store(#[from] tacgen_nn::StoreError),

    #[error("diffusion step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("sampler steps {steps} invalid for schedule of length {max}")]
    BadStepCount { steps: usize, max: usize },

    #[error("{context}: expected shape {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("codec fingerprint mismatch: weights built against {expected}, loaded codec is {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    #[error("base fingerprint mismatch: control weights built against {expected}, loaded base is {actual}")]
    BaseFingerprintMismatch { expected: String, actual: String },

    #[error("codec training did not converge: validation ssim {achieved:.4} < required {required:.4} after {steps} steps")]
    CodecNotConverged {
        achieved: f64,
        required: f64,
        steps: usize,
    },

    #[error("insufficient training data: {have} images, need at least {need}")]
    InsufficientData { have: usize, need: usize },

    #[error("non-finite value produced at sampler step {step_index} (t = {t})")]
    NanDetected { step_index: usize, t: usize },

    #[error("transformer depth {depth} must be even and nonzero")]
    OddDepth { depth: usize },

    #[error("expected {expected} control residuals, got {actual}")]
    ControlCountMismatch { expected: usize, actual: usize },

    #[error("sample {id}: no training partner shares its object and position")]
    NoPartner { id: String },

    #[error("frozen base changed during control training: {0}")]
    FrozenBaseChanged(String),

    #[error("conditioning mode {mode} does not support this operation: {what}")]
    BadMode { mode: &'static str, what: &'static str },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;
