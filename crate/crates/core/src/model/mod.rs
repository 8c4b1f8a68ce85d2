//! Classifier contract, the reference CNN, frozen snapshots and checkpoint IO.

mod adapter;
mod checkpoint;
mod network;
mod snapshot;

pub use adapter::{import_vgg_style, Activation, ExternalLayer, ExternalModel};
pub use checkpoint::{Checkpoint, ParameterBlob, CHECKPOINT_FORMAT_VERSION};
pub use network::{
    softmax, ActivationBlock, Architecture, InputShape, LayerKind, LayerSpec, Network,
    Normalization, Prediction, Shape,
};

pub use snapshot::ModelSnapshot;
