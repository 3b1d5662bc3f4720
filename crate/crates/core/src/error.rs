use std::path::PathBuf;

use crate::store::ValidationReport;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("validation failed: {0}")]
    Validation(ValidationReport),

    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("truncated file {path}: expected {expected} bytes, found {actual}")]
    Truncation {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unsupported version {found} in {path} (supported: {supported})")]
    Version {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg(msg: impl Into<String>) -> Error {
    Error::Argument(msg.into())
}
