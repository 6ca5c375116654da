use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point ({x:.3}, {y:.3}) lies outside the workspace")]
    OutOfWorkspace { x: f64, y: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch for `{operand}`: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        operand: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("corrupt record file at record {index}: {reason} (last valid record: {last_valid:?})")]
    CorruptRecord {
        index: u64,
        last_valid: Option<u64>,
        reason: String,
    },

    #[error("manifest does not match record file: {0}")]
    ManifestMismatch(String),

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("an inverse model is required but none was provided")]
    ModelMissing,

    #[error("dataset is empty: {0}")]
    EmptyDataset(&'static str),

    #[error("non-finite loss at step {step}: {diagnostics}")]
    NonFiniteLoss { step: u64, diagnostics: String },

    #[error("singular thin-plate-spline system ({0}); try a larger regularization lambda")]
    SingularTps(String),

    #[error("control points are collinear; the affine part is rank deficient")]
    CollinearPoints,

    #[error("point set needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("mask is empty")]
    EmptyMask,

    #[error("invalid demonstration: {0}")]
    InvalidDemo(String),

    #[error("shape script failed at action {step}: {source}")]
    ScriptFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
