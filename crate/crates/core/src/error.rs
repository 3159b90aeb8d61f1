use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PmxError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PmxError {
    /// Input data violates a documented invariant.
    #[error("data validation error: {0}")]
    Validation(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: String,
        expected: String,
        actual: String,
    },

    /// API misuse, e.g. backward without a recorded forward pass.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {term} became non-finite")]
    Diverged { epoch: usize, term: String },

    #[error("corrupt checkpoint at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(String),
}

impl PmxError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PmxError::Io {
            context: path.into().display().to_string(),
            source,
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        PmxError::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// Process exit code: 1 for validation-type failures, 2 for runtime ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            PmxError::Validation(_)
            | PmxError::Shape { .. }
            | PmxError::Usage(_)
            | PmxError::Config(_)
            | PmxError::Csv(_) => 1,
            _ => 2,
        }
    }
}
