use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AdfaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AdfaError {
    /// An input file or directory could not be read or decoded.
    #[error("cannot ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    /// Shapes, hashes or settings that do not fit together.
    #[error("{0}")]
    Config(String),

    /// A function was called outside its domain.
    #[error("{0}")]
    Argument(String),

    /// NaN or infinity where a finite value was required.
    #[error("{0}")]
    Numeric(String),

    /// A checkpoint or report file is malformed.
    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[cfg(feature = "onnx")]
    #[error("inference provider: {0}")]
    Provider(String),
}

impl AdfaError {
    pub(crate) fn ingestion(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        AdfaError::Ingestion {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    /// Short stable identifier used by the command-line front end.
    pub fn class(&self) -> &'static str {
        match self {
            AdfaError::Ingestion { .. } => "ingestion",
            AdfaError::Config(_) => "config",
            AdfaError::Argument(_) => "argument",
            AdfaError::Numeric(_) => "numeric",
            AdfaError::Format(_) => "format",
            AdfaError::Io(_) => "io",
            #[cfg(feature = "onnx")]
            AdfaError::Provider(_) => "provider",
        }
    }

    /// Process exit code for [`AdfaError::class`].
    pub fn exit_code(&self) -> i32 {
        match self {
            AdfaError::Argument(_) => 2,
            AdfaError::Ingestion { .. } => 3,
            AdfaError::Config(_) => 4,
            AdfaError::Numeric(_) => 5,
            AdfaError::Format(_) => 6,
            AdfaError::Io(_) => 7,
            #[cfg(feature = "onnx")]
            AdfaError::Provider(_) => 8,
        }
    }
}
