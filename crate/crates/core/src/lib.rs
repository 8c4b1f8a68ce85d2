//! Explanation-guided fine-tuning for convolutional image classifiers.
//!
//! A classifier is turned into a self-explaining model by attaching a
//! differentiable Grad-CAM branch to one of its convolutional layers. Each
//! fine-tuning step takes a user correction of the predicted class and/or of
//! the binary explanation mask and descends the composite objective
//!
//! ```text
//! L = (1 - λ) · CE(p, y) + λ · (1 - SoftJaccard(σ((norm(S) - t) / τ), mask))
//! ```
//!
//! where `S = ReLU(Σ_k a_k A^k)` uses channel weights `a_k` taken from a frozen
//! copy of the model, so no gradient flows through them.
//!
//! Module map:
//! - [`model`]: sequential CNN with manual backprop, snapshots, checkpoints and
//!   an importer for externally trained VGG-style weights.
//! - [`explainer`]: channel weights, saliency, normalization, hard and soft masks.
//! - [`losses`]: cross-entropy, hard/soft Jaccard, the λ-weighted combination.
//! - [`trainer`]: the per-sample two-pass update, epoch loop, sliced schedule.
//! - [`data`]: dataset IO, mask unions, balancing, splits, slices, feedback.
//! - [`synthetic`]: a desk-scale marker dataset where the evidence is known.
//! - [`metrics`]: accuracy, per-class sensitivity, Jaccard mean and spread.

pub mod data;
pub mod error;
pub mod explainer;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};

/// Input image in height × width × channels layout, values normalized to `[0, 1]`.
pub type Image = ndarray::Array3<f64>;
