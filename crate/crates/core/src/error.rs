//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by alignment, training and evaluation routines.
#[derive(Debug, Error)]
pub enum AdmError {
    #[error("degenerate projection: |denominator| = {0:e} at or below 1e-8")]
    DegenerateProjection(f64),

    #[error("singular homography: |det| = {0:e}")]
    SingularHomography(f64),

    #[error("degenerate region: {0}")]
    DegenerateRegion(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("backward called without a recorded forward pass")]
    NoRecordedForward,

    #[error("training diverged at step {step}: non-finite loss")]
    DivergedTraining { step: u64 },

    #[error("could not generate a pair with sufficient overlap after {tries} tries")]
    InsufficientOverlap { tries: usize },

    #[error("no control points inside the ground-truth overlap")]
    EmptyOverlap,

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("missing checkpoint at {0}")]
    MissingCheckpoint(PathBuf),

    #[error("missing ground truth for pair {0}")]
    MissingGroundTruth(String),

    #[error("result and ground-truth pairs do not match: {0}")]
    MismatchedPairs(String),

    #[error("gradient check failed: worst relative error {worst:e} in {layer}")]
    GradCheckFailure { layer: String, worst: f64 },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AdmError {
    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        AdmError::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AdmError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, AdmError>;
