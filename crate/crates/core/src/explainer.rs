//! Grad-CAM saliency with frozen channel weights, and its conversion into
//! binary (display, metrics) and sigmoid-relaxed (training) explanation masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma};
use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::model::{ActivationBlock, Network, Prediction};
use crate::Image;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;

/// Per-channel importance `a_k^c`: the spatial mean of `∂y^c/∂A^k`.
///
/// Always a plain value: nothing computed from it propagates gradient back
/// into the weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights {
    pub weights: Vec<f64>,
    pub class_index: usize,
}

impl ChannelWeights {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: self.weights.iter().map(|w| w * factor).collect(),
            class_index: self.class_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub values: Array2<f64>,
    pub class_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskOrigin {
    Model,
    Feedback,
    GroundTruth,
}

/// Binary explanation mask at an arbitrary resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExplanationMask {
    pub values: Array2<bool>,
    pub origin: MaskOrigin,
}

/// Sigmoid-relaxed mask, entries strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub values: Array2<f64>,
    pub threshold: f64,
    pub temperature: f64,
}

impl ExplanationMask {
    pub fn new(values: Array2<bool>, origin: MaskOrigin) -> Self {
        Self { values, origin }
    }

    pub fn zeros(resolution: (usize, usize), origin: MaskOrigin) -> Self {
        Self::new(Array2::from_elem(resolution, false), origin)
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn coverage(&self) -> f64 {
        self.count_ones() as f64 / self.values.len().max(1) as f64
    }

    /// 8-bit grayscale PNG with 0 = background, 255 = explanation.
    pub fn to_png(&self) -> Result<Vec<u8>> {
        let (h, w) = self.resolution();
        let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([if self.values[[y as usize, x as usize]] { 255 } else { 0 }])
        });
        let mut out = Cursor::new(Vec::new());
        img.write_to(&mut out, ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    /// Decodes a mask, rejecting any pixel that is not exactly 0 or 255.
    pub fn from_png(bytes: &[u8], origin: MaskOrigin) -> Result<Self> {
        let img = image::load_from_memory(bytes)?.to_luma8();
        let mut values = Array2::from_elem((img.height() as usize, img.width() as usize), false);
        for (x, y, p) in img.enumerate_pixels() {
            values[[y as usize, x as usize]] = match p.0[0] {
                0 => false,
                255 => true,
                v => return input(format!("mask pixel ({x}, {y}) = {v} is not binary")),
            };
        }
        Ok(Self::new(values, origin))
    }

    /// Decodes a mask, treating any pixel ≥ 128 as foreground.
    pub fn from_gray_image(img: &GrayImage, origin: MaskOrigin) -> Self {
        let mut values = Array2::from_elem((img.height() as usize, img.width() as usize), false);
        for (x, y, p) in img.enumerate_pixels() {
            values[[y as usize, x as usize]] = p.0[0] >= 128;
        }
        Self::new(values, origin)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

/// Spatial mean of each gradient channel.
pub fn channel_weights(gradient: &Array3<f64>, class_index: usize) -> Result<ChannelWeights> {
    let (k, h, w) = gradient.dim();
    let z = h * w;
    if z == 0 || k == 0 {
        return input("gradient has empty channel or spatial dimensions");
    }
    if gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite class-score gradient".into()));
    }
    let weights = gradient
        .outer_iter()
        .map(|ch| ch.iter().sum::<f64>() / z as f64)
        .collect();
    Ok(ChannelWeights {
        weights,
        class_index,
    })
}

/// Weighted channel sum before the ReLU.
fn weighted_sum(act: &ActivationBlock, weights: &ChannelWeights) -> Result<Array2<f64>> {
    if act.channels() != weights.len() {
        return input(format!(
            "activation has {} channels but {} weights were given",
            act.channels(),
            weights.len()
        ));
    }
    let mut pre = Array2::zeros(act.spatial());
    for (ch, &w) in act.values.outer_iter().zip(&weights.weights) {
        pre.scaled_add(w, &ch);
    }
    Ok(pre)
}

/// `ReLU(Σ_k a_k A^k)`.
pub fn saliency(act: &ActivationBlock, weights: &ChannelWeights) -> Result<SaliencyMap> {
    let pre = weighted_sum(act, weights)?;
    Ok(SaliencyMap {
        values: pre.mapv(|v| v.max(0.0)),
        class_index: weights.class_index,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub map: SaliencyMap,
    /// The divisor used; 0 when degenerate.
    pub max: f64,
    /// Set when the input was identically zero and was returned unchanged.
    pub degenerate: bool,
}

/// Divides by the maximum so the peak is exactly 1.
pub fn normalize(map: &SaliencyMap) -> Normalized {
    let max = map.values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        Normalized {
            map: SaliencyMap {
                values: map.values.mapv(|v| v / max),
                class_index: map.class_index,
            },
            max,
            degenerate: false,
        }
    } else {
        Normalized {
            map: map.clone(),
            max: 0.0,
            degenerate: true,
        }
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return input(format!("threshold {t} outside [0, 1]"));
    }
    Ok(())
}

/// Pixel is 1 iff its normalized saliency is strictly greater than `t`.
pub fn hard_threshold(map: &SaliencyMap, t: f64) -> Result<ExplanationMask> {
    check_threshold(t)?;
    Ok(ExplanationMask::new(
        map.values.mapv(|v| v > t),
        MaskOrigin::Model,
    ))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid((value - t) / τ)` per pixel.
pub fn soft_threshold(map: &SaliencyMap, t: f64, temperature: f64) -> Result<SoftMask> {
    check_threshold(t)?;
    if !(temperature > 0.0 && temperature.is_finite()) {
        return input(format!("temperature {temperature} must be positive"));
    }
    Ok(SoftMask {
        values: map.values.mapv(|v| sigmoid((v - t) / temperature)),
        threshold: t,
        temperature,
    })
}

/// Resamples a binary mask. Shrinking an axis groups source pixels into
/// blocks and takes the majority (ties count as 1); growing an axis repeats
/// the nearest source pixel.
pub fn align_resolution(mask: &ExplanationMask, target: (usize, usize)) -> Result<ExplanationMask> {
    let (sh, sw) = mask.resolution();
    let (th, tw) = target;
    if sh == 0 || sw == 0 || th == 0 || tw == 0 {
        return input("mask resolutions must be at least 1×1");
    }
    if (sh, sw) == target {
        return Ok(mask.clone());
    }
    let span = |i: usize, src: usize, dst: usize| -> (usize, usize) {
        if dst <= src {
            (i * src / dst, (i + 1) * src / dst)
        } else {
            let s = i * src / dst;
            (s, s + 1)
        }
    };
    let values = Array2::from_shape_fn(target, |(y, x)| {
        let (r0, r1) = span(y, sh, th);
        let (c0, c1) = span(x, sw, tw);
        let block = mask.values.slice(ndarray::s![r0..r1, c0..c1]);
        let ones = block.iter().filter(|&&v| v).count();
        2 * ones >= block.len()
    });
    Ok(ExplanationMask::new(values, mask.origin))
}

/// Nearest-neighbour enlargement of a real-valued map, for display.
pub fn upsample_map(values: &Array2<f64>, target: (usize, usize)) -> Array2<f64> {
    let (sh, sw) = values.dim();
    Array2::from_shape_fn(target, |(y, x)| {
        values[[(y * sh / target.0).min(sh - 1), (x * sw / target.1).min(sw - 1)]]
    })
}

/// Grayscale PNG of a `[0, 1]` map.
pub fn heatmap_png(values: &Array2<f64>) -> Result<Vec<u8>> {
    let (h, w) = values.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[[y as usize, x as usize]].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// The differentiable branch `A^k → soft mask`, with what backward needs.
#[derive(Debug, Clone)]
pub struct SoftExplanation {
    pre_activation: Array2<f64>,
    argmax: (usize, usize),
    pub normalized: Normalized,
    pub soft: SoftMask,
}

impl SoftExplanation {
    pub fn degenerate(&self) -> bool {
        self.normalized.degenerate
    }

    /// Hard mask of the same normalized map, for logging and metrics.
    pub fn hard_mask(&self) -> Result<ExplanationMask> {
        hard_threshold(&self.normalized.map, self.soft.threshold)
    }

    /// Pulls `∂L/∂soft` back to `∂L/∂A`. The weights are constants here.
    /// A degenerate map returns a zero gradient.
    pub fn backward(&self, weights: &ChannelWeights, d_soft: &Array2<f64>) -> Array3<f64> {
        let (h, w) = self.pre_activation.dim();
        let mut d_act = Array3::zeros((weights.len(), h, w));
        if self.degenerate() {
            return d_act;
        }
        let tau = self.soft.temperature;
        let max = self.normalized.max;
        // through the sigmoid
        let d_norm = Zip::from(d_soft)
            .and(&self.soft.values)
            .map_collect(|&g, &m| g * m * (1.0 - m) / tau);
        // through n = s / max, where max itself is s at argmax
        let mut d_sal = d_norm.mapv(|g| g / max);
        let coupling: f64 = Zip::from(&d_norm)
            .and(&self.normalized.map.values)
            .fold(0.0, |acc, &g, &n| acc + g * n);
        d_sal[self.argmax] -= coupling / max;
        // through the ReLU
        Zip::from(&mut d_sal)
            .and(&self.pre_activation)
            .for_each(|g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
        for (mut ch, &wk) in d_act.outer_iter_mut().zip(&weights.weights) {
            ch.scaled_add(wk, &d_sal);
        }
        d_act
    }
}

/// Saliency, normalization and sigmoid relaxation in one pass.
pub fn soft_explanation(
    act: &ActivationBlock,
    weights: &ChannelWeights,
    threshold: f64,
    temperature: f64,
) -> Result<SoftExplanation> {
    let pre = weighted_sum(act, weights)?;
    let sal = SaliencyMap {
        values: pre.mapv(|v| v.max(0.0)),
        class_index: weights.class_index,
    };
    let mut argmax = (0, 0);
    let mut best = f64::NEG_INFINITY;
    for ((y, x), &v) in sal.values.indexed_iter() {
        if v > best {
            best = v;
            argmax = (y, x);
        }
    }
    let normalized = normalize(&sal);
    let soft = soft_threshold(&normalized.map, threshold, temperature)?;
    Ok(SoftExplanation {
        pre_activation: pre,
        argmax,
        normalized,
        soft,
    })
}

/// Everything shown to a user for one image: prediction, saliency and mask.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub prediction: Prediction,
    pub weights: ChannelWeights,
    pub saliency: SaliencyMap,
    pub normalized: Normalized,
    pub mask: ExplanationMask,
}

impl Explanation {
    pub fn class_index(&self) -> usize {
        self.weights.class_index
    }
}

/// Grad-CAM on an un-mutated model, explaining `class` or, when `None`, the
/// predicted class.
pub fn explain(model: &Network, image: &Image, class: Option<usize>, threshold: f64) -> Result<Explanation> {
    let trace = model.trace(image)?;
    let prediction = model.prediction(&trace)?;
    let class = class.unwrap_or_else(|| prediction.predicted_class());
    if class >= model.num_classes() {
        return input(format!("class index {class} out of range"));
    }
    let weights = channel_weights(&model.class_score_gradient_traced(&trace, class), class)?;
    let saliency = saliency(&prediction.activations, &weights)?;
    let normalized = normalize(&saliency);
    let mask = hard_threshold(&normalized.map, threshold)?;
    Ok(Explanation {
        prediction,
        weights,
        saliency,
        normalized,
        mask,
    })
}
