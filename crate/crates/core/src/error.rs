use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the keyword-spotting toolchain.
#[derive(Debug, Error)]
pub enum KwsError {
    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("frame {0} is not covered by any segment")]
    Coverage(usize),

    #[error("annotation error: {0}")]
    Annotation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl KwsError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        KwsError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            KwsError::Config(_) | KwsError::Parameter(_) => 2,
            KwsError::DegenerateInput(_) | KwsError::TooShort(_) | KwsError::Coverage(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, KwsError>;
