use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Core(saliencytune::Error),
    #[error("plotting failed: {0}")]
    Plot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<saliencytune::Error> for CliError {
    fn from(e: saliencytune::Error) -> Self {
        match e {
            saliencytune::Error::Config(m) => CliError::Config(m),
            e @ saliencytune::Error::Dataset { .. } => CliError::Dataset(e.to_string()),
            e => CliError::Core(e),
        }
    }
}

impl CliError {
    /// 2 for bad configuration, 3 when the dataset cannot be loaded.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Dataset(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
