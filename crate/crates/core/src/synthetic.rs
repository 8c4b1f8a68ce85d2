//! Desk-scale marker dataset with known evidence.
//!
//! Every 32×32 RGB image is background noise plus one square marker whose
//! texture alone determines the class: horizontal stripes, vertical stripes
//! or a checkerboard. The ground-truth explanation is the marker's square, so
//! a correct explanation has to highlight it.

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::ImageSample;
use crate::error::{input, Result};
use crate::explainer::{ExplanationMask, MaskOrigin};
use crate::model::InputShape;

pub const SIDE: usize = 32;
pub const NUM_CLASSES: usize = 3;
pub const MIN_SAMPLES: usize = 30;
/// Marker side lengths, chosen so the mask covers 4.8%–14.1% of the image.
pub const MARKER_SIDES: std::ops::RangeInclusive<usize> = 7..=12;

const BRIGHT: f64 = 0.85;
const DARK: f64 = 0.15;

pub fn input_shape() -> InputShape {
    InputShape {
        height: SIDE,
        width: SIDE,
        channels: 3,
    }
}

/// Marker texture value at marker-local coordinates.
pub fn texture(class: usize, y: usize, x: usize) -> f64 {
    let on = match class {
        0 => y.is_multiple_of(2),
        1 => x.is_multiple_of(2),
        _ => (x + y).is_multiple_of(2),
    };
    if on {
        BRIGHT
    } else {
        DARK
    }
}

/// `n` samples with class counts differing by at most one.
pub fn generate_synthetic_dataset(n: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if n < MIN_SAMPLES {
        return input(format!("synthetic dataset needs at least {MIN_SAMPLES} samples, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % NUM_CLASSES).collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| render(&mut rng, format!("syn{seed}_{i:05}"), label))
        .collect())
}

fn render(rng: &mut ChaCha8Rng, id: String, label: usize) -> ImageSample {
    let side = rng.random_range(MARKER_SIDES);
    let top = rng.random_range(0..=SIDE - side);
    let left = rng.random_range(0..=SIDE - side);
    let tint: [f64; 3] = [
        rng.random_range(0.8..1.0),
        rng.random_range(0.6..0.9),
        rng.random_range(0.5..0.8),
    ];
    let mut image = Array3::zeros((SIDE, SIDE, 3));
    let mut mask = Array2::from_elem((SIDE, SIDE), false);
    for y in 0..SIDE {
        for x in 0..SIDE {
            let inside = (top..top + side).contains(&y) && (left..left + side).contains(&x);
            let base = if inside {
                mask[[y, x]] = true;
                texture(label, y - top, x - left)
            } else {
                0.5
            };
            for c in 0..3 {
                let noise = rng.random_range(-0.15..0.15);
                image[[y, x, c]] = ((base + noise) * tint[c]).clamp(0.0, 1.0);
            }
        }
    }
    ImageSample {
        id,
        image,
        label,
        gt_mask: Some(ExplanationMask::new(mask, MaskOrigin::GroundTruth)),
        duplicate_of: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_classes() {
        let data = generate_synthetic_dataset(300, 7).unwrap();
        let mut counts = [0; 3];
        data.iter().for_each(|s| counts[s.label] += 1);
        assert_eq!(counts, [100, 100, 100]);
        assert!(generate_synthetic_dataset(29, 0).is_err());
    }

    #[test]
    fn mask_coverage_in_range() {
        for s in generate_synthetic_dataset(120, 3).unwrap() {
            let cov = s.gt_mask.unwrap().coverage();
            assert!((0.04..=0.15).contains(&cov), "coverage {cov}");
        }
    }

    #[test]
    fn deterministic_under_seed() {
        assert_eq!(
            generate_synthetic_dataset(45, 11).unwrap(),
            generate_synthetic_dataset(45, 11).unwrap()
        );
    }
}
