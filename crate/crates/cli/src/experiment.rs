//! Full-pool and sliced experiments over all requested loss modes.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use saliencytune::data::{
    load_dataset, make_slices, split, ClassSet, FeedbackExample, ImageSample, Splits,
};
use saliencytune::metrics::{evaluate, MetricsReport};
use saliencytune::model::{Checkpoint, InputShape, Network};
use saliencytune::synthetic::generate_synthetic_dataset;
use saliencytune::trainer::{
    fmt, fmt_opt, finetune, sliced_finetune, train_classifier, TrainingConfig, TrainingHistory,
};
use serde::Serialize;
use tracing::{info, warn};

use crate::config::{DatasetSource, ExperimentConfig, LossMode, Mode};
use crate::error::{CliError, Result};
use crate::output::{write_atomic, write_csv_atomic};
use crate::plots::emit_plots;

pub const RESULTS_FILE: &str = "results.csv";
pub const CURVES_FILE: &str = "curves.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Input size of the reference network used when no checkpoint is given.
pub fn reference_input() -> InputShape {
    saliencytune::synthetic::input_shape()
}

/// One row of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    /// `baseline` or a loss mode name.
    pub run: String,
    pub lambda: Option<f64>,
    pub report: MetricsReport,
    pub best_epoch: Option<usize>,
}

/// Test metrics after one slice of a sliced run.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub loss: LossMode,
    pub lambda: f64,
    /// 1-based.
    pub slice: usize,
    pub slice_size: usize,
    pub report: MetricsReport,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<ResultRow>,
    pub curves: Vec<CurvePoint>,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Data and starting model shared by every loss mode.
pub struct Prepared {
    pub classes: ClassSet,
    pub splits: Splits,
    pub baseline: Network,
}

pub fn load_samples(config: &ExperimentConfig, input: InputShape) -> Result<Vec<ImageSample>> {
    match &config.dataset {
        DatasetSource::Synthetic { n, seed } => Ok(generate_synthetic_dataset(*n, *seed)?),
        DatasetSource::Path(root) => load_dataset(root, &config.class_set(), input).map_err(|e| match e {
            saliencytune::Error::Dataset { .. } => CliError::Dataset(e.to_string()),
            other => CliError::Dataset(format!("{}: {other}", root.display())),
        }),
    }
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let classes = config.class_set();
    let checkpoint = match &config.baseline.checkpoint {
        Some(path) => Some(Checkpoint::load(path)?.to_network()?),
        None => None,
    };
    let input = checkpoint
        .as_ref()
        .map(Network::input_shape)
        .unwrap_or_else(reference_input);
    let samples = load_samples(config, input)?;
    info!(samples = samples.len(), "dataset loaded");
    let splits = split(&samples, config.fractions, config.training.seed, config.split_mode())?;
    if splits.pool.is_empty() || splits.validation.is_empty() || splits.test.is_empty() {
        return Err(CliError::Config(format!(
            "split produced an empty part (pool {}, validation {}, test {})",
            splits.pool.len(),
            splits.validation.len(),
            splits.test.len()
        )));
    }
    info!(
        pool = splits.pool.len(),
        validation = splits.validation.len(),
        test = splits.test.len(),
        "split"
    );

    let baseline = match checkpoint {
        Some(net) => {
            if net.num_classes() != classes.len() {
                return Err(CliError::Config(format!(
                    "checkpoint has {} classes, config lists {}",
                    net.num_classes(),
                    classes.len()
                )));
            }
            net
        }
        None => {
            let b = &config.baseline;
            let init = Network::reference(input, classes.len(), b.init_seed)?;
            let pretrain = match config.dataset {
                DatasetSource::Synthetic { .. } => generate_synthetic_dataset(b.pretrain_samples, b.pretrain_seed)?,
                DatasetSource::Path(_) => splits.pool.clone(),
            };
            let cfg = TrainingConfig {
                epochs: b.epochs,
                learning_rate: b.learning_rate,
                ..config.training.clone()
            };
            let out = train_classifier(&init, &pretrain, &splits.validation, &classes, &cfg)?;
            info!(
                accuracy = out.history.best().validation.accuracy,
                epoch = out.history.best_epoch,
                "baseline classifier trained"
            );
            out.best
        }
    };
    Ok(Prepared {
        classes,
        splits,
        baseline,
    })
}

struct ModeRun {
    loss: LossMode,
    lambda: f64,
    row: ResultRow,
    curves: Vec<CurvePoint>,
    histories: Vec<(String, TrainingHistory)>,
    best: Network,
}

fn simulated(samples: impl IntoIterator<Item = ImageSample>) -> Vec<FeedbackExample> {
    samples.into_iter().map(FeedbackExample::simulated).collect()
}

fn run_mode(config: &ExperimentConfig, prep: &Prepared, loss: LossMode) -> Result<ModeRun> {
    let lambda = loss.lambda(config.training.lambda);
    let cfg = TrainingConfig {
        lambda,
        ..config.training.clone()
    };
    let Splits {
        pool,
        validation,
        test,
    } = &prep.splits;
    info!(%loss, lambda, "fine-tuning");
    match config.mode {
        Mode::Full => {
            let out = finetune(&prep.baseline, &simulated(pool.iter().cloned()), validation, &prep.classes, &cfg)?;
            let report = evaluate(&out.best, test, cfg.threshold, &prep.classes)?;
            Ok(ModeRun {
                loss,
                lambda,
                row: ResultRow {
                    run: loss.name().into(),
                    lambda: Some(lambda),
                    report,
                    best_epoch: Some(out.history.best_epoch),
                },
                curves: Vec::new(),
                histories: vec![(format!("history_{loss}.csv"), out.history)],
                best: out.best,
            })
        }
        Mode::Sliced => {
            let ids: Vec<String> = pool.iter().map(|s| s.id.clone()).collect();
            let schedule = make_slices(&ids, config.slices, config.training.seed.wrapping_add(1))?;
            let slices: Vec<Vec<FeedbackExample>> = schedule
                .materialize(pool)
                .into_iter()
                .map(|slice| simulated(slice.into_iter().cloned()))
                .collect();
            let outcomes = sliced_finetune(&prep.baseline, &slices, validation, test, &prep.classes, &cfg)?;
            let last = outcomes
                .last()
                .ok_or_else(|| CliError::Config("every slice was empty".into()))?;
            let curves = outcomes
                .iter()
                .map(|o| CurvePoint {
                    loss,
                    lambda,
                    slice: o.slice + 1,
                    slice_size: o.size,
                    report: o.report.clone(),
                    best_epoch: o.history.best_epoch,
                })
                .collect();
            Ok(ModeRun {
                loss,
                lambda,
                row: ResultRow {
                    run: loss.name().into(),
                    lambda: Some(lambda),
                    report: last.report.clone(),
                    best_epoch: Some(last.history.best_epoch),
                },
                curves,
                histories: outcomes
                    .iter()
                    .map(|o| (format!("history_{loss}_slice{:02}.csv", o.slice + 1), o.history.clone()))
                    .collect(),
                best: last.best.clone(),
            })
        }
    }
}

fn metric_columns(classes: &ClassSet) -> Vec<String> {
    let mut h = vec!["accuracy".to_string()];
    h.extend(classes.names().iter().map(|c| format!("sens_{c}")));
    h.extend(["avg_sensitivity", "avg_jaccard", "jaccard_sd"].map(String::from));
    h
}

fn metric_values(r: &MetricsReport, classes: &ClassSet) -> Vec<String> {
    let mut v = vec![fmt(r.accuracy)];
    v.extend(classes.names().iter().map(|c| fmt_opt(r.sensitivity(c))));
    v.extend([fmt(r.avg_sensitivity), fmt_opt(r.avg_jaccard), fmt_opt(r.jaccard_sd)]);
    v
}

pub fn results_table(rows: &[ResultRow], classes: &ClassSet) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = vec!["run".to_string(), "lambda".to_string()];
    header.extend(metric_columns(classes));
    header.extend(["n_samples", "n_explained", "threshold", "best_epoch"].map(String::from));
    let body = rows
        .iter()
        .map(|r| {
            let mut v = vec![r.run.clone(), fmt_opt(r.lambda)];
            v.extend(metric_values(&r.report, classes));
            v.extend([
                r.report.n_samples.to_string(),
                r.report.n_explained.to_string(),
                fmt(r.report.threshold_used),
                r.best_epoch.map(|e| e.to_string()).unwrap_or_default(),
            ]);
            v
        })
        .collect();
    (header, body)
}

pub fn curves_table(points: &[CurvePoint], classes: &ClassSet) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header = ["loss", "lambda", "slice", "slice_size"].map(String::from).to_vec();
    header.extend(metric_columns(classes));
    header.push("best_epoch".into());
    let body = points
        .iter()
        .map(|p| {
            let mut v = vec![
                p.loss.name().to_string(),
                fmt(p.lambda),
                p.slice.to_string(),
                p.slice_size.to_string(),
            ];
            v.extend(metric_values(&p.report, classes));
            v.push(p.best_epoch.to_string());
            v
        })
        .collect();
    (header, body)
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'static str,
    started_at: u64,
    finished_at: u64,
    config: &'a ExperimentConfig,
    files: Vec<String>,
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Runs every requested loss mode and writes the artifacts into `out_dir`.
///
/// Results and curves are written only once every run has finished, so a
/// failed experiment leaves no partial tables behind.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentOutcome> {
    let started_at = unix_now();
    let prep = prepare(config)?;
    let classes = &prep.classes;
    let baseline_report = evaluate(&prep.baseline, &prep.splits.test, config.training.threshold, classes)?;
    info!(
        accuracy = baseline_report.accuracy,
        jaccard = baseline_report.avg_jaccard,
        "baseline on test"
    );

    let runs = config
        .losses
        .par_iter()
        .map(|&loss| run_mode(config, &prep, loss))
        .collect::<Result<Vec<_>>>()?;

    std::fs::create_dir_all(out_dir.join("histories"))?;
    std::fs::create_dir_all(out_dir.join("checkpoints"))?;
    let mut files = Vec::new();
    let mut results = vec![ResultRow {
        run: "baseline".into(),
        lambda: None,
        report: baseline_report,
        best_epoch: None,
    }];
    let mut curves = Vec::new();
    let save = |net: &Network, name: &str, files: &mut Vec<PathBuf>| -> Result<()> {
        let path = out_dir.join("checkpoints").join(format!("{name}.json"));
        Checkpoint::from_network(net, 0).save(&path)?;
        files.push(path);
        Ok(())
    };
    save(&prep.baseline, "baseline", &mut files)?;
    for run in runs {
        for (name, history) in &run.histories {
            let path = out_dir.join("histories").join(name);
            let mut rows = vec![TrainingHistory::csv_header(classes)];
            rows.extend(history.csv_rows(classes));
            write_csv_atomic(&path, &rows)?;
            files.push(path);
        }
        save(&run.best, run.loss.name(), &mut files)?;
        info!(loss = %run.loss, lambda = run.lambda, accuracy = run.row.report.accuracy, jaccard = run.row.report.avg_jaccard, "run finished");
        results.push(run.row);
        curves.extend(run.curves);
    }

    let (header, body) = results_table(&results, classes);
    let results_path = out_dir.join(RESULTS_FILE);
    write_csv_atomic(&results_path, &std::iter::once(header).chain(body).collect::<Vec<_>>())?;
    files.push(results_path);

    if config.mode == Mode::Sliced {
        let (header, body) = curves_table(&curves, classes);
        let curves_path = out_dir.join(CURVES_FILE);
        write_csv_atomic(&curves_path, &std::iter::once(header).chain(body).collect::<Vec<_>>())?;
        files.push(curves_path.clone());
        files.extend(emit_plots(&curves_path, out_dir)?);
    } else if !curves.is_empty() {
        warn!("curves are only written in sliced mode");
    }

    let rel: Vec<String> = files
        .iter()
        .map(|p| p.strip_prefix(out_dir).unwrap_or(p).display().to_string())
        .collect();
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION"),
        started_at,
        finished_at: unix_now(),
        config,
        files: rel,
    };
    let manifest_path = out_dir.join(MANIFEST_FILE);
    write_atomic(&manifest_path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    files.push(manifest_path);

    Ok(ExperimentOutcome {
        results,
        curves,
        out_dir: out_dir.to_path_buf(),
        files,
    })
}
