//! Import of externally trained VGG-style classifiers.
//!
//! The exchange format mirrors what Keras-like frameworks export: conv kernels
//! in `[ky][kx][in][out]` layout, dense kernels in `[in][out]` layout, fused
//! activations, and flattening in height-width-channel order. The importer
//! rewrites all of this into the native channel-major [`Network`] layout.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, InputShape, LayerKind, LayerSpec, Network, Normalization};
use crate::error::{input, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Linear,
    Relu,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "class_name")]
pub enum ExternalLayer {
    Conv2D {
        name: String,
        filters: usize,
        kernel_size: usize,
        /// `[ky][kx][in][out]`
        kernel: Vec<f64>,
        bias: Vec<f64>,
        #[serde(default)]
        activation: Activation,
    },
    MaxPooling2D {
        name: String,
    },
    Flatten {
        name: String,
    },
    Dense {
        name: String,
        units: usize,
        /// `[in][out]`
        kernel: Vec<f64>,
        bias: Vec<f64>,
        #[serde(default)]
        activation: Activation,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalModel {
    pub input: InputShape,
    #[serde(default)]
    pub normalization: Option<Normalization>,
    pub layers: Vec<ExternalLayer>,
}

impl ExternalModel {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Converts an exported model into a [`Network`].
///
/// A conv layer `name` with a fused ReLU becomes `name_linear` followed by a
/// ReLU called `name`, so selecting `name` as the explanation layer refers to
/// the activated output. Without an explicit choice the last conv layer is
/// used. A trailing softmax is dropped since [`Network::forward`] applies one.
pub fn import_vgg_style(model: &ExternalModel, explanation_layer: Option<&str>) -> Result<Network> {
    let mut layers = Vec::new();
    let mut weights: Vec<(String, Vec<f64>)> = Vec::new();
    let (mut h, mut w, mut c) = (model.input.height, model.input.width, model.input.channels);
    // spatial shape at the flatten point, used to permute the first dense kernel
    let mut flattened: Option<(usize, usize, usize)> = None;
    let mut first_dense = true;
    let mut last_conv = None;
    let n = model.layers.len();

    for (idx, layer) in model.layers.iter().enumerate() {
        match layer {
            ExternalLayer::Conv2D {
                name,
                filters,
                kernel_size: k,
                kernel,
                bias,
                activation,
            } => {
                let (k, f) = (*k, *filters);
                if kernel.len() != k * k * c * f || bias.len() != f {
                    return input(format!("conv `{name}` kernel/bias sizes do not match"));
                }
                let mut native = vec![0.0; f * c * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        for i in 0..c {
                            for o in 0..f {
                                native[((o * c + i) * k + ky) * k + kx] =
                                    kernel[((ky * k + kx) * c + i) * f + o];
                            }
                        }
                    }
                }
                native.extend_from_slice(bias);
                let kind = LayerKind::Conv2d {
                    in_channels: c,
                    out_channels: f,
                    kernel: k,
                };
                match activation {
                    Activation::Linear => {
                        layers.push(LayerSpec::new(name.clone(), kind));
                        weights.push((name.clone(), native));
                    }
                    Activation::Relu => {
                        let linear = format!("{name}_linear");
                        layers.push(LayerSpec::new(linear.clone(), kind));
                        layers.push(LayerSpec::new(name.clone(), LayerKind::Relu));
                        weights.push((linear, native));
                    }
                    Activation::Softmax => {
                        return input(format!("softmax on conv `{name}` is not supported"))
                    }
                }
                last_conv = Some(name.clone());
                c = f;
            }
            ExternalLayer::MaxPooling2D { name } => {
                layers.push(LayerSpec::new(name.clone(), LayerKind::MaxPool2));
                h /= 2;
                w /= 2;
            }
            ExternalLayer::Flatten { name } => {
                layers.push(LayerSpec::new(name.clone(), LayerKind::Flatten));
                flattened = Some((h, w, c));
            }
            ExternalLayer::Dense {
                name,
                units,
                kernel,
                bias,
                activation,
            } => {
                let inputs = match flattened {
                    Some(_) if first_dense => h * w * c,
                    _ => c,
                };
                let u = *units;
                if kernel.len() != inputs * u || bias.len() != u {
                    return input(format!("dense `{name}` kernel/bias sizes do not match"));
                }
                let mut native = vec![0.0; u * inputs];
                for o in 0..u {
                    for j in 0..inputs {
                        // j indexes the exporter's flattened input
                        let dst = match flattened {
                            Some((fh, fw, fc)) if first_dense => {
                                let ch = j % fc;
                                let xx = (j / fc) % fw;
                                let y = j / (fc * fw);
                                (ch * fh + y) * fw + xx
                            }
                            _ => j,
                        };
                        native[o * inputs + dst] = kernel[j * u + o];
                    }
                }
                native.extend_from_slice(bias);
                let kind = LayerKind::Dense { inputs, outputs: u };
                match activation {
                    Activation::Linear => {
                        layers.push(LayerSpec::new(name.clone(), kind));
                        weights.push((name.clone(), native));
                    }
                    Activation::Relu => {
                        let linear = format!("{name}_linear");
                        layers.push(LayerSpec::new(linear.clone(), kind));
                        layers.push(LayerSpec::new(name.clone(), LayerKind::Relu));
                        weights.push((linear, native));
                    }
                    Activation::Softmax if idx + 1 == n => {
                        layers.push(LayerSpec::new(name.clone(), kind));
                        weights.push((name.clone(), native));
                    }
                    Activation::Softmax => {
                        return input(format!("softmax is only allowed on the final layer, found on `{name}`"))
                    }
                }
                if flattened.is_some() {
                    first_dense = false;
                }
                c = u;
                h = 1;
                w = 1;
            }
        }
    }

    let arch = Architecture {
        input: model.input,
        normalization: model
            .normalization
            .clone()
            .unwrap_or_else(|| Normalization::identity(model.input.channels)),
        layers,
    };
    let target = explanation_layer
        .map(str::to_string)
        .or(last_conv)
        .ok_or_else(|| Error::Input("model has no convolutional layer".into()))?;
    let mut net = Network::new(arch, Some(&target))?;
    for (name, params) in weights {
        let range = net
            .layer_param_range(&name)
            .expect("layer created above");
        net.params_mut()[range].copy_from_slice(&params);
    }
    Ok(net)
}
