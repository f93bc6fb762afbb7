use std::io;

/// Errors raised across the benchmark library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input shape error: {0}")]
    InputShape(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at epoch {epoch}: {reason}")]
    Divergence { epoch: usize, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("SWAG collection error: {0}")]
    Collection(String),
    #[error("SWAG rank error: need K >= 2, got {0}")]
    Rank(usize),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("unsupported corruption: {0}")]
    UnsupportedCorruption(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error at row {row}: {reason}")]
    Parse { row: usize, reason: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
