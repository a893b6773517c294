use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),
    #[error("local window too small: {0}")]
    WindowTooSmall(String),
    #[error("device store capacity of {capacity} keyframes exceeded")]
    CapacityExceeded { capacity: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("sequence generation failed: {0}")]
    GenerationFailed(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
