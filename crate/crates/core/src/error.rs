use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    #[error("instance error: {0}")]
    Instance(String),

    #[error("mixing cap exceeded: no t <= {cap} achieves a Dobrushin coefficient <= 1/4")]
    MixingCapExceeded { cap: usize },

    #[error("update stream exhausted after {got} of {needed} updates")]
    InputUnderrun { needed: usize, got: usize },

    #[error("data drop leaves {m} updates, need at least 2")]
    InsufficientUpdates { m: usize },

    #[error("outcome space of size {size} exceeds the enumeration cap {cap}")]
    EnumerationCap { size: usize, cap: usize },

    #[error("out of range: {0}")]
    Range(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-friendly category, echoed by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "argument",
            Error::Model(_) => "model",
            Error::GenerationFailed { .. } => "generation",
            Error::Instance(_) => "instance",
            Error::MixingCapExceeded { .. } => "mixing",
            Error::InputUnderrun { .. } => "underrun",
            Error::InsufficientUpdates { .. } => "insufficient-updates",
            Error::EnumerationCap { .. } => "enumeration-cap",
            Error::Range(_) => "range",
            Error::InsufficientData(_) => "insufficient-data",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
