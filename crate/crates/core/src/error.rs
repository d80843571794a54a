use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("point ({x}, {y}) lies outside the box")]
    PointOutsideBox { x: f64, y: f64 },
    #[error("box has zero area")]
    ZeroAreaBox,
    #[error("class {0} is inactive")]
    InactiveClass(usize),
    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

pub(crate) fn check_finite(what: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}
