use std::path::PathBuf;

/// Errors raised by the fine-tuning toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller supplied data that violates an operation's precondition.
    #[error("invalid input: {0}")]
    Input(String),
    /// A computation produced NaN or infinity.
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// A hyperparameter is outside its declared range.
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn input<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Input(msg.into()))
}
