use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use saliencytune_cli::config::{DatasetSource, ExperimentConfig, LossMode, Mode};
use saliencytune_cli::error::{CliError, Result};
use saliencytune_cli::experiment::{run_experiment, CURVES_FILE};
use saliencytune_cli::plots::emit_plots;
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "saliencytune", version, about = "Explanation-guided fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fine-tune with each loss mode and write metrics tables.
    Run(RunArgs),
    /// Redraw the slice plots from an existing curves.csv.
    Plot {
        /// curves.csv, or a run directory containing one.
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory with labels.csv, images/ and masks/.
    #[arg(long, conflicts_with = "synthetic")]
    dataset: Option<PathBuf>,
    /// Use a generated marker dataset of this many images.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    slices: Option<usize>,
    /// Comma-separated subset of cls, exp, combined.
    #[arg(long, value_delimiter = ',')]
    losses: Option<Vec<LossMode>>,
    /// Explanation weight of the combined loss.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Upsample before splitting (duplicates may cross splits).
    #[arg(long)]
    fidelity_split: bool,
    /// Start from this checkpoint instead of training a baseline.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, env = "SALIENCYTUNE_OUT")]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = self.dataset {
            c.dataset = DatasetSource::Path(p);
        }
        if let Some(n) = self.synthetic {
            let seed = self.seed.unwrap_or(c.training.seed);
            c.dataset = DatasetSource::Synthetic { n, seed };
        }
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(k) = self.slices {
            c.slices = k;
        }
        if let Some(l) = self.losses {
            c.losses = l;
        }
        if let Some(v) = self.lambda {
            c.training.lambda = v;
        }
        if let Some(v) = self.lr {
            c.training.learning_rate = v;
        }
        if let Some(v) = self.threshold {
            c.training.threshold = v;
        }
        if let Some(v) = self.epochs {
            c.training.epochs = v;
        }
        if let Some(v) = self.seed {
            c.training.seed = v;
        }
        if self.fidelity_split {
            c.fidelity_split = true;
        }
        if let Some(p) = self.checkpoint {
            c.baseline.checkpoint = Some(p);
        }
        if let Some(p) = self.out {
            c.out = Some(p);
        }
        c.validate()?;
        Ok(c)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.into_config()?;
            let out = config.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"));
            let outcome = run_experiment(&config, &out)?;
            for row in &outcome.results {
                println!(
                    "{:<9} accuracy {:.4}  avg sensitivity {:.4}  avg jaccard {}",
                    row.run,
                    row.report.accuracy,
                    row.report.avg_sensitivity,
                    row.report.avg_jaccard.map(|j| format!("{j:.4}")).unwrap_or_else(|| "n/a".into())
                );
            }
            println!("artifacts in {}", out.display());
            Ok(())
        }
        Command::Plot { input, out } => {
            let curves = if input.is_dir() { input.join(CURVES_FILE) } else { input };
            if !curves.exists() {
                return Err(CliError::Config(format!("{} does not exist", curves.display())));
            }
            let out = out.unwrap_or_else(|| curves.parent().map(PathBuf::from).unwrap_or_default());
            for f in emit_plots(&curves, &out)? {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
