//! Command-line experiment runner: full-pool and sliced fine-tuning over the
//! classification, explanation and combined losses.

pub mod config;
pub mod error;
pub mod experiment;
pub mod output;
pub mod plots;

pub use config::{BaselineConfig, DatasetSource, ExperimentConfig, LossMode, Mode};
pub use error::{CliError, Result};
pub use experiment::{run_experiment, ExperimentOutcome};
