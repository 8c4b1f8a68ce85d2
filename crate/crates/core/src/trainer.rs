//! Fine-tuning on simultaneous label and explanation feedback.
//!
//! Every update follows the same two-pass recipe:
//!
//! 1. freeze a snapshot of the model;
//! 2. on the snapshot, take `∂y^c/∂A` for the corrected (or predicted) class
//!    and average it into channel weights;
//! 3. forward the live model to get `A` and the class probabilities;
//! 4. build the saliency map and its sigmoid-relaxed mask from the live `A`
//!    and the frozen weights;
//! 5. score against the feedback with the λ-weighted loss;
//! 6. take one gradient step on the live parameters.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::data::{ClassSet, FeedbackExample, FeedbackRecord, ImageSample};
use crate::error::{input, Error, Result};
use crate::explainer::{
    align_resolution, channel_weights, soft_explanation, ChannelWeights, ExplanationMask,
    SoftExplanation, DEFAULT_TEMPERATURE, DEFAULT_THRESHOLD,
};
use crate::losses::{
    combined_loss, cross_entropy, jaccard_index, soft_jaccard, soft_jaccard_gradient,
    LossBreakdown, DEGENERATE_PENALTY, LOG_EPSILON,
};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{ModelSnapshot, Network, Prediction};
use crate::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    ValAvgJaccard,
    ValAccuracy,
    /// Average Jaccard when λ > 0, accuracy when λ = 0.
    #[default]
    Composite,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    /// `θ ← θ − γ ∇L(θ)`.
    #[default]
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub threshold: f64,
    pub temperature: f64,
    pub seed: u64,
    pub batch_size: usize,
    pub selection: SelectionCriterion,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub optimizer: Optimizer,
    /// Visit the feedback in a seeded random order each epoch.
    pub shuffle: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            learning_rate: 0.01,
            epochs: 10,
            threshold: DEFAULT_THRESHOLD,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
            batch_size: 1,
            selection: SelectionCriterion::Composite,
            clip_norm: Some(5.0),
            optimizer: Optimizer::Sgd,
            shuffle: true,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Config(what));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature {} must be positive", self.temperature));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        Ok(())
    }

    fn criterion(&self) -> SelectionCriterion {
        match self.selection {
            SelectionCriterion::Composite if self.lambda > 0.0 => SelectionCriterion::ValAvgJaccard,
            SelectionCriterion::Composite => SelectionCriterion::ValAccuracy,
            other => other,
        }
    }
}

/// What the loss is measured against.
#[derive(Debug, Clone, Copy, Default)]
pub struct Target<'a> {
    pub label: Option<usize>,
    /// At explanation-layer resolution.
    pub mask: Option<&'a ExplanationMask>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: LossBreakdown,
    /// `∂L/∂θ` in the network's flat parameter order, when requested.
    pub gradient: Option<Vec<f64>>,
    pub prediction: Prediction,
    /// Present whenever a mask and channel weights were supplied.
    pub explanation: Option<SoftExplanation>,
}

impl ObjectiveOutput {
    pub fn degenerate(&self) -> bool {
        self.explanation.as_ref().is_some_and(SoftExplanation::degenerate)
    }
}

/// The λ-weighted loss on the live `model` with frozen channel `weights`.
///
/// The explanation term is evaluated whenever a mask and weights are given,
/// and weighted by `lambda`; the classification term needs a label. An
/// all-zero saliency map costs [`DEGENERATE_PENALTY`] and contributes no
/// gradient.
pub fn objective(
    model: &Network,
    image: &Image,
    weights: Option<&ChannelWeights>,
    target: Target<'_>,
    lambda: f64,
    threshold: f64,
    temperature: f64,
    with_gradient: bool,
) -> Result<ObjectiveOutput> {
    if target.label.is_none() && target.mask.is_none() {
        return input("target needs a label or a mask");
    }
    let trace = model.trace(image)?;
    let prediction = model.prediction(&trace)?;
    let n = model.num_classes();

    let mut logit_grad = vec![0.0; n];
    let l_cls = match target.label {
        Some(c) => {
            let l = cross_entropy(&prediction.probabilities, c)?;
            if prediction.probabilities[c] >= LOG_EPSILON {
                for (k, g) in logit_grad.iter_mut().enumerate() {
                    let y = if k == c { 1.0 } else { 0.0 };
                    *g = (1.0 - lambda) * (prediction.probabilities[k] - y);
                }
            }
            l
        }
        None => 0.0,
    };

    let mut act_grad = None;
    let (l_exp, explanation) = match (target.mask, weights) {
        (Some(mask), Some(w)) => {
            let exp = soft_explanation(&prediction.activations, w, threshold, temperature)?;
            let l = if exp.degenerate() {
                debug!(class = w.class_index, "degenerate saliency, fixed penalty");
                DEGENERATE_PENALTY
            } else {
                if with_gradient && lambda > 0.0 {
                    let d_soft = soft_jaccard_gradient(&exp.soft, mask)?.mapv(|g| -lambda * g);
                    act_grad = Some(exp.backward(w, &d_soft));
                }
                1.0 - soft_jaccard(&exp.soft, mask)?
            };
            (l, Some(exp))
        }
        (Some(_), None) if lambda > 0.0 => {
            return input("explanation loss needs channel weights");
        }
        _ => (0.0, None),
    };

    let loss = combined_loss(l_cls, l_exp, lambda)?;
    if !loss.l_total.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss:?}")));
    }
    let gradient = with_gradient.then(|| {
        let mut g = vec![0.0; model.num_params()];
        let flat;
        let inject = match &act_grad {
            Some(a) => {
                flat = a.iter().copied().collect::<Vec<f64>>();
                Some((model.explanation_layer_index(), flat.as_slice()))
            }
            None => None,
        };
        model.backprop(&trace, &logit_grad, inject, 0, Some(&mut g));
        g
    });
    Ok(ObjectiveOutput {
        loss,
        gradient,
        prediction,
        explanation,
    })
}

/// Channel weights for `class` computed on a frozen snapshot.
pub fn snapshot_weights(snapshot: &ModelSnapshot, image: &Image, class: usize) -> Result<ChannelWeights> {
    channel_weights(&snapshot.class_score_gradient(image, class)?, class)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub sample_id: String,
    pub loss: LossBreakdown,
    pub predicted: usize,
    pub label: Option<usize>,
    /// Hard-mask Jaccard against the feedback mask, when the mask was used.
    pub jaccard: Option<f64>,
    pub degenerate: bool,
    /// Norm of the parameter change applied by this step's update.
    pub update_norm: f64,
    pub clipped: bool,
}

#[derive(Debug, Clone)]
enum OptimizerState {
    Sgd,
    Adam { m: Vec<f64>, v: Vec<f64>, t: i32 },
}

/// Applies updates with a persistent optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainingConfig,
    state: OptimizerState,
    step: u64,
    mask_reads: usize,
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let state = match config.optimizer {
            Optimizer::Sgd => OptimizerState::Sgd,
            Optimizer::Adam { .. } => OptimizerState::Adam {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            },
        };
        Ok(Self {
            config,
            state,
            step: 0,
            mask_reads: 0,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    /// Number of feedback masks read so far.
    pub fn mask_reads(&self) -> usize {
        self.mask_reads
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update from a batch of corrections; the batch loss is the mean.
    pub fn step(
        &mut self,
        model: &mut Network,
        batch: &[(&ImageSample, &FeedbackRecord)],
    ) -> Result<Vec<StepLog>> {
        if batch.is_empty() {
            return input("empty batch");
        }
        let cfg = self.config.clone();
        let snapshot = model.snapshot(self.step);
        let layer = {
            let s = model.explanation_shape();
            (s.height, s.width)
        };
        let mut total = vec![0.0; model.num_params()];
        let mut logs = Vec::with_capacity(batch.len());
        for &(sample, feedback) in batch {
            let label = feedback.corrected_label;
            let has_mask = feedback.corrected_mask.is_some();
            let lambda = match (label.is_some(), has_mask) {
                (false, false) => {
                    return input(format!(
                        "feedback for `{}` corrects neither label nor mask",
                        feedback.sample_id
                    ))
                }
                (false, true) => 1.0,
                (true, false) => 0.0,
                (true, true) => cfg.lambda,
            };
            let mask = if lambda > 0.0 {
                self.mask_reads += 1;
                let m = feedback.corrected_mask.as_ref().expect("checked above");
                Some(align_resolution(m, layer)?)
            } else {
                None
            };
            let weights = match &mask {
                Some(_) => {
                    let class = match label {
                        Some(c) => c,
                        None => snapshot.forward(&sample.image)?.predicted_class(),
                    };
                    Some(snapshot_weights(&snapshot, &sample.image, class)?)
                }
                None => None,
            };
            let out = objective(
                model,
                &sample.image,
                weights.as_ref(),
                Target {
                    label,
                    mask: mask.as_ref(),
                },
                lambda,
                cfg.threshold,
                cfg.temperature,
                true,
            )?;
            let grad = out.gradient.as_ref().expect("gradient requested");
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for `{}`",
                    sample.id
                )));
            }
            let scale = 1.0 / batch.len() as f64;
            total.iter_mut().zip(grad).for_each(|(t, g)| *t += scale * g);
            let jaccard = match (&out.explanation, &mask) {
                (Some(e), Some(m)) => Some(jaccard_index(&e.hard_mask()?, m)?),
                _ => None,
            };
            logs.push(StepLog {
                step: self.step,
                sample_id: sample.id.clone(),
                loss: out.loss,
                predicted: out.prediction.predicted_class(),
                label,
                jaccard,
                degenerate: out.degenerate(),
                update_norm: 0.0,
                clipped: false,
            });
        }

        let norm = total.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clipped = matches!(cfg.clip_norm, Some(c) if norm > c);
        if let (true, Some(c)) = (clipped, cfg.clip_norm) {
            let s = c / norm;
            total.iter_mut().for_each(|g| *g *= s);
        }
        let update_norm = self.apply(model, &total);
        self.step += 1;
        for log in &mut logs {
            log.update_norm = update_norm;
            log.clipped = clipped;
        }
        Ok(logs)
    }

    fn apply(&mut self, model: &mut Network, grad: &[f64]) -> f64 {
        let lr = self.config.learning_rate;
        let params = model.params_mut();
        let mut sq = 0.0;
        match (&mut self.state, self.config.optimizer) {
            (OptimizerState::Adam { m, v, t }, Optimizer::Adam { beta1, beta2, epsilon }) => {
                if m.len() != grad.len() {
                    *m = vec![0.0; grad.len()];
                    *v = vec![0.0; grad.len()];
                }
                *t += 1;
                let (c1, c2) = (1.0 - beta1.powi(*t), 1.0 - beta2.powi(*t));
                for i in 0..grad.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    let delta = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                    params[i] -= delta;
                    sq += delta * delta;
                }
            }
            _ => {
                for (p, g) in params.iter_mut().zip(grad) {
                    let delta = lr * g;
                    *p -= delta;
                    sq += delta * delta;
                }
            }
        }
        sq.sqrt()
    }
}

/// A single stateless gradient-descent step on one correction.
pub fn finetune_step(
    model: &mut Network,
    sample: &ImageSample,
    feedback: &FeedbackRecord,
    config: &TrainingConfig,
) -> Result<StepLog> {
    let mut trainer = Trainer::new(config.clone())?;
    Ok(trainer.step(model, &[(sample, feedback)])?.remove(0))
}

/// Means over one epoch's training steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub loss: LossBreakdown,
    pub accuracy: Option<f64>,
    pub avg_jaccard: Option<f64>,
    pub jaccard_sd: Option<f64>,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the model before any update.
    pub epoch: usize,
    pub train: Option<TrainSummary>,
    pub validation: MetricsReport,
    pub validation_loss: LossBreakdown,
    pub criterion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Feedback masks read during training.
    pub mask_reads: usize,
}

impl TrainingHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch]
    }

    pub fn csv_header(classes: &ClassSet) -> Vec<String> {
        let mut h: Vec<String> = ["epoch", "split", "accuracy"].map(String::from).to_vec();
        h.extend(classes.names().iter().map(|c| format!("sens_{c}")));
        h.extend(
            [
                "avg_sensitivity",
                "avg_jaccard",
                "jaccard_sd",
                "l_cls",
                "l_exp",
                "l_total",
            ]
            .map(String::from),
        );
        h
    }

    /// Rows of the history table: one `val` row per epoch, preceded by a
    /// `train` row for every epoch that trained.
    pub fn csv_rows(&self, classes: &ClassSet) -> Vec<Vec<String>> {
        let mut rows = Vec::new();
        for e in &self.epochs {
            if let Some(t) = &e.train {
                let mut r = vec![e.epoch.to_string(), "train".into(), fmt_opt(t.accuracy)];
                r.extend(classes.names().iter().map(|_| String::new()));
                r.extend([
                    String::new(),
                    fmt_opt(t.avg_jaccard),
                    fmt_opt(t.jaccard_sd),
                    fmt(t.loss.l_cls),
                    fmt(t.loss.l_exp),
                    fmt(t.loss.l_total),
                ]);
                rows.push(r);
            }
            let v = &e.validation;
            let mut r = vec![e.epoch.to_string(), "val".into(), fmt(v.accuracy)];
            r.extend(classes.names().iter().map(|c| fmt_opt(v.sensitivity(c))));
            r.extend([
                fmt(v.avg_sensitivity),
                fmt_opt(v.avg_jaccard),
                fmt_opt(v.jaccard_sd),
                fmt(e.validation_loss.l_cls),
                fmt(e.validation_loss.l_exp),
                fmt(e.validation_loss.l_total),
            ]);
            rows.push(r);
        }
        rows
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, classes: &ClassSet) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::csv_header(classes))?;
        for r in self.csv_rows(classes) {
            w.write_record(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }
}

pub fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt).unwrap_or_default()
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    /// The model at the best epoch.
    pub best: Network,
    pub history: TrainingHistory,
}

/// Validation metrics plus the mean validation loss at `config.lambda`,
/// scored against ground-truth labels and masks.
pub fn validate(
    model: &Network,
    validation: &[ImageSample],
    classes: &ClassSet,
    config: &TrainingConfig,
) -> Result<(MetricsReport, LossBreakdown)> {
    let report = evaluate(model, validation, config.threshold, classes)?;
    let layer = {
        let s = model.explanation_shape();
        (s.height, s.width)
    };
    let losses = validation
        .par_iter()
        .map(|s| -> Result<LossBreakdown> {
            let mask = s.gt_mask.as_ref().map(|m| align_resolution(m, layer)).transpose()?;
            let weights = match mask {
                Some(_) => Some(channel_weights(
                    &model.class_score_gradient(&s.image, s.label)?,
                    s.label,
                )?),
                None => None,
            };
            let lambda = if mask.is_some() { config.lambda } else { 0.0 };
            Ok(objective(
                model,
                &s.image,
                weights.as_ref(),
                Target {
                    label: Some(s.label),
                    mask: mask.as_ref(),
                },
                lambda,
                config.threshold,
                config.temperature,
                false,
            )?
            .loss)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((report, mean_loss(&losses, config.lambda)))
}

fn mean_loss(losses: &[LossBreakdown], lambda: f64) -> LossBreakdown {
    let n = losses.len().max(1) as f64;
    LossBreakdown {
        l_cls: losses.iter().map(|l| l.l_cls).sum::<f64>() / n,
        l_exp: losses.iter().map(|l| l.l_exp).sum::<f64>() / n,
        l_total: losses.iter().map(|l| l.l_total).sum::<f64>() / n,
        lambda,
    }
}

fn criterion_value(config: &TrainingConfig, report: &MetricsReport) -> f64 {
    match config.criterion() {
        SelectionCriterion::ValAvgJaccard => report.avg_jaccard.unwrap_or(0.0),
        _ => report.accuracy,
    }
}

fn check_disjoint(feedback: &[FeedbackExample], validation: &[ImageSample]) -> Result<()> {
    let val: HashSet<&str> = validation.iter().map(ImageSample::original_id).collect();
    if let Some(x) = feedback
        .iter()
        .find(|x| val.contains(x.sample.original_id()))
    {
        return input(format!(
            "sample `{}` is in both the feedback and validation sets",
            x.sample.original_id()
        ));
    }
    Ok(())
}

/// Fine-tunes for `config.epochs` epochs and returns the model that scored
/// best on validation. Epoch 0 (the untouched model) is a candidate, so with
/// zero epochs the input model comes back unchanged.
pub fn finetune(
    model: &Network,
    feedback: &[FeedbackExample],
    validation: &[ImageSample],
    classes: &ClassSet,
    config: &TrainingConfig,
) -> Result<FineTuneOutcome> {
    if feedback.is_empty() {
        return input("feedback set is empty");
    }
    check_disjoint(feedback, validation)?;
    let mut trainer = Trainer::new(config.clone())?;
    let mut live = model.clone();

    let (report, val_loss) = validate(&live, validation, classes, config)?;
    let criterion = criterion_value(config, &report);
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train: None,
        validation: report,
        validation_loss: val_loss,
        criterion,
    }];
    let mut best = (0, criterion, live.clone());
    let mut steps = Vec::new();
    let mut order: Vec<usize> = (0..feedback.len()).collect();

    for epoch in 1..=config.epochs {
        if config.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
            order.shuffle(&mut rng);
        }
        let first = steps.len();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (&feedback[i].sample, &feedback[i].feedback))
                .collect();
            steps.extend(trainer.step(&mut live, &batch)?);
        }
        let train = summarize_steps(&steps[first..], config.lambda);
        let (report, val_loss) = validate(&live, validation, classes, config)?;
        let criterion = criterion_value(config, &report);
        info!(
            epoch,
            l_total = train.loss.l_total,
            val_accuracy = report.accuracy,
            val_jaccard = report.avg_jaccard,
            "epoch done"
        );
        if criterion > best.1 {
            best = (epoch, criterion, live.clone());
        }
        epochs.push(EpochRecord {
            epoch,
            train: Some(train),
            validation: report,
            validation_loss: val_loss,
            criterion,
        });
    }
    let clipped = steps.iter().filter(|s| s.clipped).count();
    if clipped > 0 {
        debug!(clipped, "steps had their gradient clipped");
    }
    Ok(FineTuneOutcome {
        best: best.2,
        history: TrainingHistory {
            steps,
            epochs,
            best_epoch: best.0,
            mask_reads: trainer.mask_reads(),
        },
    })
}

fn summarize_steps(steps: &[StepLog], lambda: f64) -> TrainSummary {
    let losses: Vec<LossBreakdown> = steps.iter().map(|s| s.loss).collect();
    let labelled: Vec<&StepLog> = steps.iter().filter(|s| s.label.is_some()).collect();
    let accuracy = (!labelled.is_empty()).then(|| {
        labelled
            .iter()
            .filter(|s| s.label == Some(s.predicted))
            .count() as f64
            / labelled.len() as f64
    });
    let js: Vec<f64> = steps.iter().filter_map(|s| s.jaccard).collect();
    let (avg_jaccard, jaccard_sd) = if js.is_empty() {
        (None, None)
    } else {
        let n = js.len() as f64;
        let mean = js.iter().sum::<f64>() / n;
        let sd = (js.iter().map(|j| (j - mean).powi(2)).sum::<f64>() / n).sqrt();
        (Some(mean), Some(sd))
    };
    TrainSummary {
        loss: mean_loss(&losses, lambda),
        accuracy,
        avg_jaccard,
        jaccard_sd,
        steps: steps.len(),
    }
}

#[derive(Debug, Clone)]
pub struct SliceOutcome {
    pub slice: usize,
    pub size: usize,
    pub best: Network,
    /// Test-set metrics of the slice's best model.
    pub report: MetricsReport,
    pub history: TrainingHistory,
}

/// Fine-tunes on each slice in turn, starting every slice from the previous
/// slice's best model. Earlier slices are not revisited. Empty slices are
/// skipped.
pub fn sliced_finetune(
    model: &Network,
    slices: &[Vec<FeedbackExample>],
    validation: &[ImageSample],
    test: &[ImageSample],
    classes: &ClassSet,
    config: &TrainingConfig,
) -> Result<Vec<SliceOutcome>> {
    let mut seen = HashSet::new();
    for x in slices.iter().flatten() {
        if !seen.insert(x.sample.id.as_str()) {
            return input(format!("sample `{}` appears in more than one slice", x.sample.id));
        }
    }
    let mut current = model.clone();
    let mut out = Vec::new();
    for (i, slice) in slices.iter().enumerate() {
        if slice.is_empty() {
            warn!(slice = i, "empty slice skipped");
            continue;
        }
        let cfg = TrainingConfig {
            seed: config.seed.wrapping_add(i as u64),
            ..config.clone()
        };
        let outcome = finetune(&current, slice, validation, classes, &cfg)?;
        let report = evaluate(&outcome.best, test, config.threshold, classes)?;
        info!(slice = i, accuracy = report.accuracy, jaccard = report.avg_jaccard, "slice done");
        current = outcome.best.clone();
        out.push(SliceOutcome {
            slice: i,
            size: slice.len(),
            best: outcome.best,
            report,
            history: outcome.history,
        });
    }
    Ok(out)
}

/// Classification-only training from labels, used to produce a baseline
/// classifier before any explanation feedback is given.
pub fn train_classifier(
    model: &Network,
    samples: &[ImageSample],
    validation: &[ImageSample],
    classes: &ClassSet,
    config: &TrainingConfig,
) -> Result<FineTuneOutcome> {
    let feedback: Vec<FeedbackExample> = samples
        .iter()
        .map(|s| FeedbackExample {
            sample: s.clone(),
            feedback: FeedbackRecord {
                sample_id: s.id.clone(),
                corrected_label: Some(s.label),
                corrected_mask: None,
                source: crate::data::FeedbackSource::Simulated,
                created_at: 0,
            },
        })
        .collect();
    let config = TrainingConfig {
        lambda: 0.0,
        selection: SelectionCriterion::ValAccuracy,
        ..config.clone()
    };
    finetune(model, &feedback, validation, classes, &config)
}
