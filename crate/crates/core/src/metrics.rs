//! Accuracy, per-class sensitivity and explanation overlap.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClassSet, ImageSample};
use crate::error::{input, Result};
use crate::explainer::{align_resolution, explain};
use crate::losses::jaccard_index;
use crate::model::Network;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// Recall per class; classes without members are left out.
    pub per_class_sensitivity: BTreeMap<String, f64>,
    /// Unweighted mean of `per_class_sensitivity`.
    pub avg_sensitivity: f64,
    /// Mean hard-mask Jaccard over samples with a ground-truth mask.
    pub avg_jaccard: Option<f64>,
    /// Population standard deviation of the per-sample Jaccard values.
    pub jaccard_sd: Option<f64>,
    pub n_samples: usize,
    pub n_explained: usize,
    pub threshold_used: f64,
}

impl MetricsReport {
    pub fn sensitivity(&self, class: &str) -> Option<f64> {
        self.per_class_sensitivity.get(class).copied()
    }
}

/// What one evaluated sample contributes to a report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOutcome {
    pub predicted: usize,
    pub label: usize,
    pub jaccard: Option<f64>,
}

/// Aggregates per-sample outcomes.
pub fn summarize(outcomes: &[SampleOutcome], classes: &ClassSet, threshold: f64) -> Result<MetricsReport> {
    if outcomes.is_empty() {
        return input("cannot evaluate an empty sample set");
    }
    let mut members = vec![0usize; classes.len()];
    let mut hits = vec![0usize; classes.len()];
    for o in outcomes {
        if o.label >= classes.len() {
            return input(format!("label {} outside the class set", o.label));
        }
        members[o.label] += 1;
        hits[o.label] += usize::from(o.predicted == o.label);
    }
    let correct: usize = hits.iter().sum();
    let per_class_sensitivity: BTreeMap<String, f64> = (0..classes.len())
        .filter(|&c| members[c] > 0)
        .map(|c| (classes.name(c).to_string(), hits[c] as f64 / members[c] as f64))
        .collect();
    let avg_sensitivity =
        per_class_sensitivity.values().sum::<f64>() / per_class_sensitivity.len() as f64;

    let jaccards: Vec<f64> = outcomes.iter().filter_map(|o| o.jaccard).collect();
    let (avg_jaccard, jaccard_sd) = if jaccards.is_empty() {
        (None, None)
    } else {
        let n = jaccards.len() as f64;
        let mean = jaccards.iter().sum::<f64>() / n;
        let var = jaccards.iter().map(|j| (j - mean).powi(2)).sum::<f64>() / n;
        (Some(mean), Some(var.sqrt()))
    };
    Ok(MetricsReport {
        accuracy: correct as f64 / outcomes.len() as f64,
        per_class_sensitivity,
        avg_sensitivity,
        avg_jaccard,
        jaccard_sd,
        n_samples: outcomes.len(),
        n_explained: jaccards.len(),
        threshold_used: threshold,
    })
}

/// Classifies one sample and, when it has ground truth, compares the hard
/// mask of the predicted class with the ground truth at layer resolution.
pub fn sample_outcome(model: &Network, sample: &ImageSample, threshold: f64) -> Result<SampleOutcome> {
    let exp = explain(model, &sample.image, None, threshold)?;
    let jaccard = match &sample.gt_mask {
        Some(gt) => Some(jaccard_index(
            &exp.mask,
            &align_resolution(gt, exp.mask.resolution())?,
        )?),
        None => None,
    };
    Ok(SampleOutcome {
        predicted: exp.prediction.predicted_class(),
        label: sample.label,
        jaccard,
    })
}

/// Evaluates `model` on `samples`. Samples are processed in parallel; the
/// result does not depend on thread scheduling.
pub fn evaluate(
    model: &Network,
    samples: &[ImageSample],
    threshold: f64,
    classes: &ClassSet,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return input("cannot evaluate an empty sample set");
    }
    let outcomes = samples
        .par_iter()
        .map(|s| sample_outcome(model, s, threshold))
        .collect::<Result<Vec<_>>>()?;
    summarize(&outcomes, classes, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn outcome(predicted: usize, label: usize, jaccard: Option<f64>) -> SampleOutcome {
        SampleOutcome {
            predicted,
            label,
            jaccard,
        }
    }

    #[test]
    fn perfect_classifier() {
        let o: Vec<_> = (0..9).map(|i| outcome(i % 3, i % 3, Some(1.0))).collect();
        let r = summarize(&o, &ClassSet::default(), 0.5).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_class_sensitivity.values().all(|&s| s == 1.0));
        assert_eq!(r.avg_jaccard, Some(1.0));
        assert_eq!(r.jaccard_sd, Some(0.0));
    }

    #[test]
    fn constant_prediction() {
        let o: Vec<_> = (0..30).map(|i| outcome(1, i % 3, None)).collect();
        let r = summarize(&o, &ClassSet::default(), 0.5).unwrap();
        assert_eq!(r.sensitivity("NV"), Some(1.0));
        assert_eq!(r.sensitivity("MEL"), Some(0.0));
        assert_eq!(r.sensitivity("BKL"), Some(0.0));
        assert!((r.avg_sensitivity - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.avg_jaccard, None);
    }

    #[test]
    fn absent_class_is_not_zero() {
        let o = vec![outcome(0, 0, None), outcome(0, 1, None)];
        let r = summarize(&o, &ClassSet::default(), 0.5).unwrap();
        assert_eq!(r.sensitivity("BKL"), None);
        assert_eq!(r.avg_sensitivity, 0.5);
        assert!(summarize(&[], &ClassSet::default(), 0.5).is_err());
    }

    #[test]
    fn matches_confusion_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let o: Vec<_> = (0..50)
                .map(|_| {
                    let j = rng.random_bool(0.7).then(|| rng.random::<f64>());
                    outcome(rng.random_range(0..3), rng.random_range(0..3), j)
                })
                .collect();
            let r = summarize(&o, &ClassSet::default(), 0.5).unwrap();
            let mut cm = [[0usize; 3]; 3];
            for x in &o {
                cm[x.label][x.predicted] += 1;
            }
            let total: usize = cm.iter().flatten().sum();
            let acc = (0..3).map(|c| cm[c][c]).sum::<usize>() as f64 / total as f64;
            assert!((r.accuracy - acc).abs() < 1e-9);
            let mut sens = Vec::new();
            for (c, name) in ["MEL", "NV", "BKL"].iter().enumerate() {
                let row: usize = cm[c].iter().sum();
                if row > 0 {
                    let s = cm[c][c] as f64 / row as f64;
                    sens.push(s);
                    assert!((r.sensitivity(name).unwrap() - s).abs() < 1e-9);
                }
            }
            let avg = sens.iter().sum::<f64>() / sens.len() as f64;
            assert!((r.avg_sensitivity - avg).abs() < 1e-9);
            let js: Vec<f64> = o.iter().filter_map(|x| x.jaccard).collect();
            let mean = js.iter().sum::<f64>() / js.len() as f64;
            let sd = (js.iter().map(|j| (j - mean) * (j - mean)).sum::<f64>() / js.len() as f64).sqrt();
            assert!((r.avg_jaccard.unwrap() - mean).abs() < 1e-9);
            assert!((r.jaccard_sd.unwrap() - sd).abs() < 1e-9);
            // accuracy is the prevalence-weighted mean of sensitivities
            let weighted: f64 = (0..3)
                .filter(|&c| cm[c].iter().sum::<usize>() > 0)
                .map(|c| {
                    let row = cm[c].iter().sum::<usize>() as f64;
                    row / total as f64 * r.sensitivity(["MEL", "NV", "BKL"][c]).unwrap()
                })
                .sum();
            assert!((weighted - r.accuracy).abs() < 1e-9);
        }
    }

    #[test]
    fn order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut o: Vec<_> = (0..40)
            .map(|_| outcome(rng.random_range(0..3), rng.random_range(0..3), Some(rng.random())))
            .collect();
        let a = summarize(&o, &ClassSet::default(), 0.5).unwrap();
        o.reverse();
        let b = summarize(&o, &ClassSet::default(), 0.5).unwrap();
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.per_class_sensitivity, b.per_class_sensitivity);
        assert!((a.avg_jaccard.unwrap() - b.avg_jaccard.unwrap()).abs() < 1e-12);
    }
}
