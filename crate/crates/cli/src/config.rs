//! Experiment configuration: a JSON file, command-line flags on top.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use saliencytune::data::{ClassSet, SplitFractions, SplitMode};
use saliencytune::trainer::TrainingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Which loss a fine-tuning run minimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Classification only, λ = 0.
    Cls,
    /// Explanation only, λ = 1.
    Exp,
    /// Both, λ from the training config.
    Combined,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Cls, LossMode::Exp, LossMode::Combined];

    pub fn lambda(self, combined: f64) -> f64 {
        match self {
            LossMode::Cls => 0.0,
            LossMode::Exp => 1.0,
            LossMode::Combined => combined,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Cls => "cls",
            LossMode::Exp => "exp",
            LossMode::Combined => "combined",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "cls" => Ok(LossMode::Cls),
            "exp" => Ok(LossMode::Exp),
            "combined" => Ok(LossMode::Combined),
            other => Err(format!("unknown loss `{other}` (expected cls, exp or combined)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Path(PathBuf),
    Synthetic { n: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    Sliced,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "sliced" => Ok(Mode::Sliced),
            other => Err(format!("unknown mode `{other}` (expected full or sliced)")),
        }
    }
}

/// Where the un-fine-tuned model comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Start from this checkpoint instead of training a baseline.
    pub checkpoint: Option<PathBuf>,
    /// Size of the separately seeded synthetic set the baseline classifier is
    /// trained on. For a dataset on disk the fine-tuning pool's labels are
    /// used instead.
    pub pretrain_samples: usize,
    pub pretrain_seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub init_seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            pretrain_samples: 600,
            pretrain_seed: 1_000_003,
            epochs: 5,
            learning_rate: 0.01,
            init_seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub mode: Mode,
    /// Number of slices in sliced mode.
    pub slices: usize,
    pub losses: Vec<LossMode>,
    pub training: TrainingConfig,
    /// Upsample before splitting. Copies of one image may then land in
    /// different splits.
    pub fidelity_split: bool,
    pub fractions: SplitFractions,
    pub classes: Vec<String>,
    pub baseline: BaselineConfig,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic { n: 600, seed: 0 },
            mode: Mode::Full,
            slices: 10,
            losses: LossMode::ALL.to_vec(),
            training: TrainingConfig::default(),
            fidelity_split: false,
            fractions: SplitFractions::default(),
            classes: ClassSet::default().names().to_vec(),
            baseline: BaselineConfig::default(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.losses.is_empty() {
            return bad("select at least one loss mode".into());
        }
        for (i, l) in self.losses.iter().enumerate() {
            if self.losses[..i].contains(l) {
                return bad(format!("loss mode `{l}` listed twice"));
            }
        }
        if self.mode == Mode::Sliced && self.slices == 0 {
            return bad("sliced mode needs at least one slice".into());
        }
        if self.classes.is_empty() {
            return bad("class set is empty".into());
        }
        if let DatasetSource::Synthetic { n, .. } = self.dataset {
            if n < saliencytune::synthetic::MIN_SAMPLES {
                return bad(format!(
                    "synthetic dataset needs at least {} samples",
                    saliencytune::synthetic::MIN_SAMPLES
                ));
            }
            if self.classes.len() != saliencytune::synthetic::NUM_CLASSES {
                return bad("the synthetic dataset has exactly three classes".into());
            }
        }
        let f = self.fractions;
        if [f.pool, f.validation, f.test].iter().any(|v| !(0.0..=1.0).contains(v))
            || (f.pool + f.validation + f.test - 1.0).abs() > 1e-9
        {
            return bad("split fractions must be in [0, 1] and sum to 1".into());
        }
        if self.baseline.checkpoint.is_none() && !(self.baseline.learning_rate > 0.0) {
            return bad("baseline learning rate must be positive".into());
        }
        Ok(self.training.validate()?)
    }

    pub fn class_set(&self) -> ClassSet {
        ClassSet::new(self.classes.iter().cloned())
    }

    pub fn split_mode(&self) -> SplitMode {
        if self.fidelity_split {
            SplitMode::Fidelity
        } else {
            SplitMode::LeakageSafe
        }
    }
}
