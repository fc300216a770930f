//! Error type shared by the whole crate.
//!
//! Errors fall into three buckets that the CLI maps onto exit codes:
//! usage (1), data validation (2), numerical failure (3). Every variant
//! carries a short machine-parsable `kind` token plus human detail.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, SurvintError>;

#[derive(Debug, Error)]
pub enum SurvintError {
    #[error("usage: {0}")]
    Usage(String),

    /// Input data failed validation. `kind` is a stable snake_case token.
    #[error("data: {kind}: {detail}")]
    Data { kind: &'static str, detail: String },

    /// A numerical procedure failed (rank deficiency, non-convergence, ...).
    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SurvintError {
    pub fn usage(msg: impl Into<String>) -> Self {
        SurvintError::Usage(msg.into())
    }

    pub fn data(kind: &'static str, detail: impl Into<String>) -> Self {
        SurvintError::Data {
            kind,
            detail: detail.into(),
        }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        SurvintError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        SurvintError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data, 3 numeric/io.
    pub fn exit_code(&self) -> i32 {
        match self {
            SurvintError::Usage(_) => 1,
            SurvintError::Data { .. } => 2,
            SurvintError::Numeric(_) | SurvintError::Io { .. } => 3,
        }
    }
}
