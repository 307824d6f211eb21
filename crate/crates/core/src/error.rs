use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// config validation failures exit with 2, numerical blow-up with 3,
/// IO problems with 4.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config validation failed: {0}")]
    Config(String),

    #[error("numerical blow-up: {context} at t={time}: sup-norm {norm:.3e} exceeds guard {guard:.1e}")]
    BlowUp {
        context: String,
        time: f64,
        norm: f64,
        guard: f64,
    },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("record corrupt: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Exit code the CLI maps this error onto.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::BlowUp { .. } | Error::NonFinite(_) => 3,
            Error::Io(_) | Error::Serde(_) | Error::Corrupt(_) => 4,
        }
    }
}
