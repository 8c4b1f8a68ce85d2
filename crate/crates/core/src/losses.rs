//! Classification loss, hard and soft Jaccard, and the λ-weighted objective.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::explainer::{ExplanationMask, SoftMask};

/// Probabilities are clamped to at least this before taking the log.
pub const LOG_EPSILON: f64 = 1e-12;
/// Added to numerator and denominator of the soft Jaccard.
pub const JACCARD_SMOOTHING: f64 = 1e-6;
/// Explanation loss charged when the saliency map is identically zero.
pub const DEGENERATE_PENALTY: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_cls: f64,
    pub l_exp: f64,
    pub l_total: f64,
    pub lambda: f64,
}

/// `-Σ label_i · ln(max(p_i, ε))` for a one-hot label.
pub fn classification_loss(probabilities: &[f64], label: &[f64]) -> Result<f64> {
    if probabilities.len() != label.len() {
        return input("probability and label vectors differ in length");
    }
    let ones = label.iter().filter(|&&v| v == 1.0).count();
    let zeros = label.iter().filter(|&&v| v == 0.0).count();
    if ones != 1 || ones + zeros != label.len() {
        return input("label is not one-hot");
    }
    Ok(-probabilities
        .iter()
        .zip(label)
        .map(|(&p, &y)| y * p.max(LOG_EPSILON).min(1.0).ln())
        .sum::<f64>())
}

/// Cross-entropy against a class index.
pub fn cross_entropy(probabilities: &[f64], class: usize) -> Result<f64> {
    let p = probabilities
        .get(class)
        .ok_or_else(|| Error::Input(format!("class {class} out of range")))?;
    Ok(-p.max(LOG_EPSILON).min(1.0).ln())
}

pub fn one_hot(class: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

fn same_resolution(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return input(format!("mask resolutions differ: {a:?} vs {b:?}"));
    }
    Ok(())
}

/// `|A ∩ B| / |A ∪ B|`, defined as 1 when both masks are empty.
pub fn jaccard_index(a: &ExplanationMask, b: &ExplanationMask) -> Result<f64> {
    same_resolution(a.resolution(), b.resolution())?;
    let (mut inter, mut union) = (0usize, 0usize);
    Zip::from(&a.values).and(&b.values).for_each(|&x, &y| {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    });
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

fn truth_values(truth: &ExplanationMask) -> Array2<f64> {
    truth.values.mapv(|v| if v { 1.0 } else { 0.0 })
}

/// `(Σ min(p, g) + s) / (Σ max(p, g) + s)`.
pub fn soft_jaccard(pred: &SoftMask, truth: &ExplanationMask) -> Result<f64> {
    same_resolution(pred.values.dim(), truth.resolution())?;
    let g = truth_values(truth);
    let (num, den) = Zip::from(&pred.values)
        .and(&g)
        .fold((0.0, 0.0), |(n, d), &p, &t| (n + p.min(t), d + p.max(t)));
    Ok((num + JACCARD_SMOOTHING) / (den + JACCARD_SMOOTHING))
}

/// ∂ soft_jaccard / ∂ pred. Ties `p == g` split the subgradient evenly.
pub fn soft_jaccard_gradient(pred: &SoftMask, truth: &ExplanationMask) -> Result<Array2<f64>> {
    same_resolution(pred.values.dim(), truth.resolution())?;
    let g = truth_values(truth);
    let (num, den) = Zip::from(&pred.values)
        .and(&g)
        .fold((0.0, 0.0), |(n, d), &p, &t| (n + p.min(t), d + p.max(t)));
    let (num, den) = (num + JACCARD_SMOOTHING, den + JACCARD_SMOOTHING);
    Ok(Zip::from(&pred.values).and(&g).map_collect(|&p, &t| {
        let (d_min, d_max) = if p < t {
            (1.0, 0.0)
        } else if p > t {
            (0.0, 1.0)
        } else {
            (0.5, 0.5)
        };
        (d_min * den - d_max * num) / (den * den)
    }))
}

/// `1 - soft_jaccard`.
pub fn explanation_loss(pred: &SoftMask, truth: &ExplanationMask) -> Result<f64> {
    Ok(1.0 - soft_jaccard(pred, truth)?)
}

/// `(1 - λ) · l_cls + λ · l_exp`.
pub fn combined_loss(l_cls: f64, l_exp: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("λ = {lambda} outside [0, 1]")));
    }
    Ok(LossBreakdown {
        l_cls,
        l_exp,
        l_total: (1.0 - lambda) * l_cls + lambda * l_exp,
        lambda,
    })
}
