use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum SeadaError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("store error in sample '{sample}': {msg}")]
    Store { sample: String, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),

    #[error("training error at step {step}: {msg}")]
    Training { step: u64, msg: String },
}

impl SeadaError {
    /// Stable short code for grep-friendly CLI error lines.
    pub fn code(&self) -> &'static str {
        match self {
            SeadaError::InvalidInput(_) => "E_INVALID",
            SeadaError::ShapeMismatch { .. } => "E_SHAPE",
            SeadaError::NonFinite(_) => "E_NONFINITE",
            SeadaError::Config(_) => "E_CONFIG",
            SeadaError::Store { .. } => "E_STORE",
            SeadaError::Io(_) => "E_IO",
            SeadaError::Serde(_) => "E_SERDE",
            SeadaError::Training { .. } => "E_TRAIN",
        }
    }
}

impl From<serde_json::Error> for SeadaError {
    fn from(e: serde_json::Error) -> Self {
        SeadaError::Serde(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SeadaError>;
