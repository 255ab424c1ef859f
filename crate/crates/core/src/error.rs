use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("label map has {0} segments, the 16-bit format holds at most 65535")]
    TooManySegments(usize),
    #[error("level {level} is not nested in its parent")]
    NonNestedLevels { level: usize },
    #[error("image {height}x{width} is too small: {reason}")]
    ImageTooSmall { height: usize, width: usize, reason: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in input to {0}")]
    NonFiniteInput(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalarLoss(Vec<usize>),
    #[error("segment {segment} has no cells at the feature-grid resolution")]
    EmptySegmentAtCellResolution { segment: usize },
    #[error("k = {k} out of range for {n} points")]
    KOutOfRange { k: usize, n: usize },
    #[error("coarse count {m} must be smaller than the fine count {n}")]
    MNotSmaller { m: usize, n: usize },
    #[error("k-means produced an empty cluster after {restarts} restarts")]
    EmptyCluster { restarts: usize },
    #[error("training diverged at step {step} (loss = {loss})")]
    DivergenceDetected { step: usize, loss: f64 },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("retrieval gallery is empty")]
    EmptyGallery,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
