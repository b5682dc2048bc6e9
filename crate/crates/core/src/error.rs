use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("attention over an empty key set")]
    EmptyKeys,

    #[error("degenerate partition: {0}")]
    DegeneratePartition(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("invalid mask {path}: {reason}")]
    InvalidMask { path: String, reason: String },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("missing tensor `{0}` in checkpoint")]
    MissingTensor(String),

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("benchmark suite parse error: {0}")]
    SuiteParse(String),

    #[error("benchmark case {index}: {violations}")]
    SuiteInvariant { index: usize, violations: String },

    #[error("mask for character {codepoint} (U+{codepoint_hex}) not found at {path}")]
    MaskResolution {
        codepoint: char,
        codepoint_hex: String,
        path: PathBuf,
    },

    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn param_err(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}
