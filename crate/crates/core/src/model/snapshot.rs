use std::sync::Arc;

use ndarray::Array3;

use super::{Network, Prediction};
use crate::error::Result;
use crate::Image;

/// Immutable deep copy of a network's parameters, taken once per update.
///
/// Channel weights for the saliency branch are computed on the snapshot, so
/// the gradient of the training loss never flows through them.
#[derive(Debug, Clone)]
pub struct ModelSnapshot {
    network: Arc<Network>,
    step: u64,
}

impl ModelSnapshot {
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn forward(&self, image: &Image) -> Result<Prediction> {
        self.network.forward(image)
    }

    /// ∂y^c/∂A on the frozen parameters. The result is a plain array with no
    /// link back to any live model.
    pub fn class_score_gradient(&self, image: &Image, class: usize) -> Result<Array3<f64>> {
        self.network.class_score_gradient(image, class)
    }
}

impl Network {
    pub fn snapshot(&self, step: u64) -> ModelSnapshot {
        ModelSnapshot {
            network: Arc::new(self.clone()),
            step,
        }
    }
}
