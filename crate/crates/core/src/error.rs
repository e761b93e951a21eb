use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("invalid corpus spec: {0}")]
    Validation(String),
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("format error on line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("unsupported checkpoint version {found:?} (expected {expected:?})")]
    UnsupportedVersion { found: String, expected: String },
    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),
    #[error("non-finite loss at step {step}: {breakdown}")]
    NonFinite { step: usize, breakdown: String },
    #[error("incompatible inputs: {0}")]
    Compatibility(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Argument(_) | Error::Validation(_) => 2,
            Error::NonFinite { .. } => 4,
            _ => 3,
        }
    }
}
