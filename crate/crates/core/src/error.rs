use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("record {id}: {reason}")]
    Record { id: u64, reason: String },

    #[error("configuration error in `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed metrics at line {line}: {reason}")]
    Metrics { line: usize, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn record(id: u64, reason: impl Into<String>) -> Self {
        Error::Record { id, reason: reason.into() }
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config { key: key.into(), reason: reason.into() }
    }
}

/// Process exit code for a successful run.
pub const EXIT_OK: i32 = 0;
/// Process exit code for configuration and input errors.
pub const EXIT_CONFIG: i32 = 1;
/// Process exit code for numerical failures (non-finite losses or parameters).
pub const EXIT_NUMERICAL: i32 = 2;

impl Error {
    /// Stable exit-code contract: numerical failures map to 2, everything else to 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite(_) => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        }
    }
}
