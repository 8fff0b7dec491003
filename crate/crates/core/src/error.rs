use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value failed a domain check; `field` names what was wrong.
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("incomplete table: missing {} row(s): {}", .missing.len(), .missing.join("; "))]
    IncompleteTable { missing: Vec<String> },

    #[error("asymmetry: {0}")]
    Asymmetry(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("level {level} has {available} record(s), {required} required (short by {})", .required - .available)]
    InsufficientLevel {
        level: u8,
        available: usize,
        required: usize,
    },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("out of order: expected case {expected}, got {got}")]
    OutOfOrder { expected: String, got: String },

    #[error("predictor unavailable: {0}")]
    PredictorUnavailable(String),

    #[error("malformed predictor response ({reason}); raw payload: {raw}")]
    PredictorProtocol { reason: String, raw: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad input rather than the environment.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::PredictorUnavailable(_) | Error::PredictorProtocol { .. }
        )
    }
}
