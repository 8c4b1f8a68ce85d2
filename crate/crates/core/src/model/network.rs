use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Error, Result};
use crate::Image;

/// Layer types supported by [`Network`]. Convolutions use stride 1 and "same"
/// zero padding; pooling is 2×2 with stride 2.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    MaxPool2,
    /// Flattens a `channels × height × width` block in channel-major order.
    Flatten,
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }

    fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => out_channels * in_channels * kernel * kernel + out_channels,
            LayerKind::Dense { inputs, outputs } => outputs * inputs + outputs,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Per-channel affine normalization applied to raw `[0, 1]` pixels before the
/// first layer: `(x - mean[c]) / std[c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }
}

/// Self-describing network layout, stored verbatim in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: InputShape,
    pub normalization: Normalization,
    pub layers: Vec<LayerSpec>,
}

impl Architecture {
    /// Desk-scale reference CNN: two 3×3 conv blocks (8 and 16 channels, ReLU,
    /// 2×2 max-pool) and one dense layer. A 32×32 input gives an 8×8 block at
    /// the explanation layer `pool2`.
    pub fn reference(input: InputShape, num_classes: usize) -> Self {
        let flat = 16 * (input.height / 4) * (input.width / 4);
        let c = input.channels;
        Self {
            input,
            normalization: Normalization::identity(c),
            layers: vec![
                LayerSpec::new(
                    "conv1",
                    LayerKind::Conv2d {
                        in_channels: c,
                        out_channels: 8,
                        kernel: 3,
                    },
                ),
                LayerSpec::new("relu1", LayerKind::Relu),
                LayerSpec::new("pool1", LayerKind::MaxPool2),
                LayerSpec::new(
                    "conv2",
                    LayerKind::Conv2d {
                        in_channels: 8,
                        out_channels: 16,
                        kernel: 3,
                    },
                ),
                LayerSpec::new("relu2", LayerKind::Relu),
                LayerSpec::new("pool2", LayerKind::MaxPool2),
                LayerSpec::new("flatten", LayerKind::Flatten),
                LayerSpec::new(
                    "fc",
                    LayerKind::Dense {
                        inputs: flat,
                        outputs: num_classes,
                    },
                ),
            ],
        }
    }
}

/// Output shape of a layer. Vectors are `(n, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activations of the explanation layer, `channels × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBlock {
    pub values: Array3<f64>,
    pub layer_id: String,
}

impl ActivationBlock {
    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    pub fn spatial(&self) -> (usize, usize) {
        let (_, h, w) = self.values.dim();
        (h, w)
    }
}

/// Result of one evaluation-mode forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub activations: ActivationBlock,
}

impl Prediction {
    pub fn predicted_class(&self) -> usize {
        argmax(&self.probabilities)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}

/// Intermediate values of a forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub(crate) struct Trace {
    pub input: Vec<f64>,
    pub outputs: Vec<Vec<f64>>,
    /// Flat input index chosen by each pooling output (empty for other layers).
    pub argmax: Vec<Vec<usize>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// A sequential convolutional classifier with all parameters in one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    explanation_layer: usize,
    shapes: Vec<Shape>,
    offsets: Vec<usize>,
    params: Vec<f64>,
}

impl Network {
    /// Builds a zero-initialized network. `explanation_layer` names the layer
    /// whose output feeds Grad-CAM; `None` selects the last spatial layer
    /// before flattening.
    pub fn new(arch: Architecture, explanation_layer: Option<&str>) -> Result<Self> {
        let shapes = infer_shapes(&arch)?;
        let explanation_layer = match explanation_layer {
            Some(name) => arch
                .layers
                .iter()
                .position(|l| l.name == name)
                .ok_or_else(|| Error::Input(format!("no layer named `{name}`")))?,
            None => default_explanation_layer(&arch)
                .ok_or_else(|| Error::Input("architecture has no spatial layer".into()))?,
        };
        let s = shapes[explanation_layer];
        let spatial = arch.layers[..=explanation_layer]
            .iter()
            .all(|l| !matches!(l.kind, LayerKind::Flatten | LayerKind::Dense { .. }));
        if !spatial || s.channels == 0 || s.height < 2 || s.width < 2 {
            return input(format!(
                "explanation layer `{}` must be a spatial block of at least 1×2×2, got {}×{}×{}",
                arch.layers[explanation_layer].name, s.channels, s.height, s.width
            ));
        }
        let mut offsets = Vec::with_capacity(arch.layers.len() + 1);
        let mut total = 0;
        for layer in &arch.layers {
            offsets.push(total);
            total += layer.param_count();
        }
        offsets.push(total);
        Ok(Self {
            arch,
            explanation_layer,
            shapes,
            offsets,
            params: vec![0.0; total],
        })
    }

    /// Reference CNN with He-uniform weights drawn from `seed`.
    pub fn reference(input: InputShape, num_classes: usize, seed: u64) -> Result<Self> {
        let mut net = Self::new(Architecture::reference(input, num_classes), None)?;
        net.init_he(seed);
        Ok(net)
    }

    /// Re-draws every weight from `U(-sqrt(6/fan_in), sqrt(6/fan_in))` and zeros biases.
    pub fn init_he(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, layer) in self.arch.layers.iter().enumerate() {
            let (fan_in, n_weights) = match layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => (
                    in_channels * kernel * kernel,
                    out_channels * in_channels * kernel * kernel,
                ),
                LayerKind::Dense { inputs, outputs } => (inputs, outputs * inputs),
                _ => continue,
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let slice = &mut self.params[self.offsets[i]..self.offsets[i + 1]];
            let (w, b) = slice.split_at_mut(n_weights);
            w.iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..bound));
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn input_shape(&self) -> InputShape {
        self.arch.input
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().map(Shape::len).unwrap_or(0)
    }

    pub fn explanation_layer_id(&self) -> &str {
        &self.arch.layers[self.explanation_layer].name
    }

    pub(crate) fn explanation_layer_index(&self) -> usize {
        self.explanation_layer
    }

    /// Shape of the explanation layer's activation block.
    pub fn explanation_shape(&self) -> Shape {
        self.shapes[self.explanation_layer]
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Parameter range `[start, end)` of a named layer in the flat vector.
    pub fn layer_param_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        let i = self.arch.layers.iter().position(|l| l.name == name)?;
        Some(self.offsets[i]..self.offsets[i + 1])
    }

    /// Overwrites a layer's weights and biases. Conv weights are laid out
    /// `[out][in][ky][kx]`, dense weights `[out][in]`.
    pub fn set_layer_params(&mut self, name: &str, weights: &[f64], bias: &[f64]) -> Result<()> {
        let i = self
            .arch
            .layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::Input(format!("no layer named `{name}`")))?;
        let range = self.offsets[i]..self.offsets[i + 1];
        if weights.len() + bias.len() != range.len() {
            return input(format!(
                "layer `{name}` holds {} parameters, got {}",
                range.len(),
                weights.len() + bias.len()
            ));
        }
        let slice = &mut self.params[range];
        slice[..weights.len()].copy_from_slice(weights);
        slice[weights.len()..].copy_from_slice(bias);
        Ok(())
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, image: &Image) -> Result<Prediction> {
        let trace = self.trace(image)?;
        self.prediction(&trace)
    }

    pub(crate) fn prediction(&self, trace: &Trace) -> Result<Prediction> {
        let activations = self.activation_block(trace);
        if activations.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite activations at layer `{}`",
                activations.layer_id
            )));
        }
        let logits = trace.logits().to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite class scores".into()));
        }
        Ok(Prediction {
            probabilities: softmax(&logits),
            logits,
            activations,
        })
    }

    pub(crate) fn activation_block(&self, trace: &Trace) -> ActivationBlock {
        let s = self.shapes[self.explanation_layer];
        let values = Array3::from_shape_vec(
            (s.channels, s.height, s.width),
            trace.outputs[self.explanation_layer].clone(),
        )
        .expect("explanation layer shape is validated at construction");
        ActivationBlock {
            values,
            layer_id: self.explanation_layer_id().to_string(),
        }
    }

    /// ∂(class score c)/∂A for the explanation layer. The class score is the
    /// pre-softmax logit.
    pub fn class_score_gradient(&self, image: &Image, class: usize) -> Result<Array3<f64>> {
        if class >= self.num_classes() {
            return input(format!(
                "class index {class} out of range for {} classes",
                self.num_classes()
            ));
        }
        let trace = self.trace(image)?;
        Ok(self.class_score_gradient_traced(&trace, class))
    }

    pub(crate) fn class_score_gradient_traced(&self, trace: &Trace, class: usize) -> Array3<f64> {
        let mut seed = vec![0.0; self.num_classes()];
        seed[class] = 1.0;
        let grad = self.backprop(trace, &seed, None, self.explanation_layer + 1, None);
        let s = self.shapes[self.explanation_layer];
        Array3::from_shape_vec((s.channels, s.height, s.width), grad)
            .expect("gradient matches explanation shape")
    }

    pub(crate) fn trace(&self, image: &Image) -> Result<Trace> {
        let x = self.prepare_input(image)?;
        let (outputs, argmax) = self.run_layers(0, &x);
        Ok(Trace {
            input: x,
            outputs,
            argmax,
        })
    }

    /// Class scores obtained by running the layers above the explanation
    /// layer on `activations`.
    pub fn head_logits(&self, activations: &Array3<f64>) -> Result<Vec<f64>> {
        let s = self.shapes[self.explanation_layer];
        if activations.dim() != (s.channels, s.height, s.width) {
            return input(format!(
                "activation shape {:?} does not match layer `{}`",
                activations.dim(),
                self.explanation_layer_id()
            ));
        }
        let x: Vec<f64> = activations.iter().copied().collect();
        let (mut outputs, _) = self.run_layers(self.explanation_layer + 1, &x);
        Ok(outputs.pop().unwrap_or(x))
    }

    fn run_layers(&self, from: usize, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
        let n = self.arch.layers.len() - from;
        let mut outputs: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut argmax = Vec::with_capacity(n);
        for (i, layer) in self.arch.layers.iter().enumerate().skip(from) {
            let in_shape = self.layer_input_shape(i);
            let inp: &[f64] = if i == from { x } else { &outputs[i - from - 1] };
            let p = &self.params[self.offsets[i]..self.offsets[i + 1]];
            let (out, idx) = match layer.kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => (
                    conv_forward(inp, p, in_channels, out_channels, kernel, in_shape),
                    Vec::new(),
                ),
                LayerKind::Relu => (inp.iter().map(|&v| relu(v)).collect(), Vec::new()),
                LayerKind::MaxPool2 => pool_forward(inp, in_shape),
                LayerKind::Flatten => (inp.to_vec(), Vec::new()),
                LayerKind::Dense { inputs, outputs: n } => {
                    (dense_forward(inp, p, inputs, n), Vec::new())
                }
            };
            outputs.push(out);
            argmax.push(idx);
        }
        (outputs, argmax)
    }

    fn prepare_input(&self, image: &Image) -> Result<Vec<f64>> {
        let InputShape {
            height,
            width,
            channels,
        } = self.arch.input;
        if image.dim() != (height, width, channels) {
            return input(format!(
                "image shape {:?} does not match model input {height}×{width}×{channels}",
                image.dim()
            ));
        }
        let norm = &self.arch.normalization;
        let mut x = vec![0.0; height * width * channels];
        for ((y, xx, c), &v) in image.indexed_iter() {
            x[(c * height + y) * width + xx] = (v - norm.mean[c]) / norm.std[c];
        }
        Ok(x)
    }

    fn layer_input_shape(&self, i: usize) -> Shape {
        if i == 0 {
            let s = self.arch.input;
            Shape {
                channels: s.channels,
                height: s.height,
                width: s.width,
            }
        } else {
            self.shapes[i - 1]
        }
    }

    /// Backpropagates `logit_grad` from the output down through layer `stop`.
    ///
    /// `inject` adds an extra gradient on the output of the given layer. When
    /// `param_grad` is supplied, parameter gradients are accumulated into it.
    /// Returns the gradient with respect to the input of layer `stop` (empty
    /// when `stop == 0`, the image gradient is never needed).
    pub(crate) fn backprop(
        &self,
        trace: &Trace,
        logit_grad: &[f64],
        inject: Option<(usize, &[f64])>,
        stop: usize,
        mut param_grad: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let n = self.arch.layers.len();
        let mut g = logit_grad.to_vec();
        for i in (stop..n).rev() {
            if let Some((at, extra)) = inject {
                if at == i {
                    g.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
                }
            }
            let in_shape = self.layer_input_shape(i);
            let inp: &[f64] = if i == 0 {
                &trace.input
            } else {
                &trace.outputs[i - 1]
            };
            let need_input = i > 0;
            let range = self.offsets[i]..self.offsets[i + 1];
            let p = &self.params[range.clone()];
            let pg = param_grad.as_deref_mut().map(|pg| &mut pg[range]);
            g = match self.arch.layers[i].kind {
                LayerKind::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                } => conv_backward(
                    inp,
                    p,
                    &g,
                    pg,
                    in_channels,
                    out_channels,
                    kernel,
                    in_shape,
                    need_input,
                ),
                LayerKind::Relu => {
                    let out = &trace.outputs[i];
                    g.iter()
                        .zip(out)
                        .map(|(&gv, &o)| if o > 0.0 { gv } else { 0.0 })
                        .collect()
                }
                LayerKind::MaxPool2 => {
                    let mut gi = vec![0.0; in_shape.len()];
                    for (&gv, &src) in g.iter().zip(&trace.argmax[i]) {
                        gi[src] += gv;
                    }
                    gi
                }
                LayerKind::Flatten => g,
                LayerKind::Dense { inputs, outputs } => {
                    dense_backward(inp, p, &g, pg, inputs, outputs, need_input)
                }
            };
        }
        g
    }
}

fn infer_shapes(arch: &Architecture) -> Result<Vec<Shape>> {
    let InputShape {
        height,
        width,
        channels,
    } = arch.input;
    if height == 0 || width == 0 || channels == 0 {
        return input("input shape must be nonzero");
    }
    let norm = &arch.normalization;
    if norm.mean.len() != channels || norm.std.len() != channels {
        return input("normalization must have one mean/std per input channel");
    }
    if norm.std.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return input("normalization std must be positive");
    }
    if arch.layers.is_empty() {
        return input("architecture has no layers");
    }
    let mut names = std::collections::HashSet::new();
    let mut cur = Shape {
        channels,
        height,
        width,
    };
    let mut flat = false;
    let mut shapes = Vec::with_capacity(arch.layers.len());
    for layer in &arch.layers {
        if !names.insert(layer.name.as_str()) {
            return input(format!("duplicate layer name `{}`", layer.name));
        }
        cur = match layer.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
            } => {
                if flat || in_channels != cur.channels {
                    return input(format!(
                        "conv `{}` expects {in_channels} spatial channels, got {}{}",
                        layer.name,
                        cur.channels,
                        if flat { " (flattened)" } else { "" }
                    ));
                }
                if kernel % 2 == 0 || out_channels == 0 {
                    return input(format!("conv `{}` needs an odd kernel", layer.name));
                }
                Shape {
                    channels: out_channels,
                    ..cur
                }
            }
            LayerKind::Relu => cur,
            LayerKind::MaxPool2 => {
                if flat || cur.height < 2 || cur.width < 2 {
                    return input(format!("pool `{}` needs a spatial input ≥ 2×2", layer.name));
                }
                Shape {
                    channels: cur.channels,
                    height: cur.height / 2,
                    width: cur.width / 2,
                }
            }
            LayerKind::Flatten => {
                flat = true;
                Shape {
                    channels: cur.len(),
                    height: 1,
                    width: 1,
                }
            }
            LayerKind::Dense { inputs, outputs } => {
                if !flat || inputs != cur.len() || outputs == 0 {
                    return input(format!(
                        "dense `{}` expects {inputs} flat inputs, got {}",
                        layer.name,
                        cur.len()
                    ));
                }
                Shape {
                    channels: outputs,
                    height: 1,
                    width: 1,
                }
            }
        };
        shapes.push(cur);
    }
    if !flat {
        return input("architecture must end in a flattened class-score vector");
    }
    Ok(shapes)
}

fn default_explanation_layer(arch: &Architecture) -> Option<usize> {
    let flatten = arch
        .layers
        .iter()
        .position(|l| matches!(l.kind, LayerKind::Flatten))?;
    flatten.checked_sub(1)
}

fn conv_forward(
    x: &[f64],
    p: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    s: Shape,
) -> Vec<f64> {
    let (h, w) = (s.height, s.width);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let (weights, bias) = p.split_at(cout * cin * k * k);
    let mut out = vec![0.0; cout * hw];
    for o in 0..cout {
        let out_o = &mut out[o * hw..(o + 1) * hw];
        out_o.iter_mut().for_each(|v| *v = bias[o]);
        for i in 0..cin {
            let x_i = &x[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    let wv = weights[((o * cin + i) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let row_out = &mut out_o[y * w + x0..y * w + x1];
                        let sx0 = (x0 as isize + dx) as usize;
                        let row_in = &x_i[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                        for (a, &b) in row_out.iter_mut().zip(row_in) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    p: &[f64],
    g: &[f64],
    param_grad: Option<&mut [f64]>,
    cin: usize,
    cout: usize,
    k: usize,
    s: Shape,
    need_input: bool,
) -> Vec<f64> {
    let (h, w) = (s.height, s.width);
    let hw = h * w;
    let pad = (k / 2) as isize;
    let n_weights = cout * cin * k * k;
    let weights = &p[..n_weights];
    let mut gx = if need_input {
        vec![0.0; cin * hw]
    } else {
        Vec::new()
    };
    let mut pg = param_grad;
    for o in 0..cout {
        let g_o = &g[o * hw..(o + 1) * hw];
        if let Some(pg) = pg.as_deref_mut() {
            pg[n_weights + o] += g_o.iter().sum::<f64>();
        }
        for i in 0..cin {
            let x_i = &x[i * hw..(i + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(dy, h);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(dx, w);
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = weights[widx];
                    let sx0 = (x0 as isize + dx) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let row_g = &g_o[y * w + x0..y * w + x1];
                        let src = sy * w + sx0..sy * w + sx0 + (x1 - x0);
                        if pg.is_some() {
                            acc += row_g
                                .iter()
                                .zip(&x_i[src.clone()])
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                        if need_input {
                            let row_gx = &mut gx[i * hw..(i + 1) * hw][src];
                            for (a, &b) in row_gx.iter_mut().zip(row_g) {
                                *a += wv * b;
                            }
                        }
                    }
                    if let Some(pg) = pg.as_deref_mut() {
                        pg[widx] += acc;
                    }
                }
            }
        }
    }
    gx
}

/// Output rows/cols `[lo, hi)` whose shifted source index stays inside `[0, n)`.
fn valid_range(d: isize, n: usize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo.min(hi), hi)
}

/// Unlike `f64::max`, lets NaN through so broken parameters are detected.
fn relu(v: f64) -> f64 {
    if v < 0.0 {
        0.0
    } else {
        v
    }
}

fn pool_forward(x: &[f64], s: Shape) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (s.height / 2, s.width / 2);
    let mut out = Vec::with_capacity(s.channels * oh * ow);
    let mut idx = Vec::with_capacity(out.capacity());
    for c in 0..s.channels {
        let base = c * s.height * s.width;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * s.width + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * s.width + 2 * xx + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}

fn dense_forward(x: &[f64], p: &[f64], inputs: usize, outputs: usize) -> Vec<f64> {
    let (weights, bias) = p.split_at(inputs * outputs);
    (0..outputs)
        .map(|o| {
            bias[o]
                + weights[o * inputs..(o + 1) * inputs]
                    .iter()
                    .zip(x)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
        })
        .collect()
}

fn dense_backward(
    x: &[f64],
    p: &[f64],
    g: &[f64],
    param_grad: Option<&mut [f64]>,
    inputs: usize,
    outputs: usize,
    need_input: bool,
) -> Vec<f64> {
    let weights = &p[..inputs * outputs];
    if let Some(pg) = param_grad {
        let (gw, gb) = pg.split_at_mut(inputs * outputs);
        for o in 0..outputs {
            gb[o] += g[o];
            for (a, &b) in gw[o * inputs..(o + 1) * inputs].iter_mut().zip(x) {
                *a += g[o] * b;
            }
        }
    }
    if !need_input {
        return Vec::new();
    }
    let mut gx = vec![0.0; inputs];
    for o in 0..outputs {
        for (a, &b) in gx.iter_mut().zip(&weights[o * inputs..(o + 1) * inputs]) {
            *a += g[o] * b;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn tiny_arch() -> Architecture {
        // 4×4×1 input, one 3×3 conv to 2 channels, flatten, dense to 2 classes
        Architecture {
            input: InputShape {
                height: 4,
                width: 4,
                channels: 1,
            },
            normalization: Normalization::identity(1),
            layers: vec![
                LayerSpec::new(
                    "conv",
                    LayerKind::Conv2d {
                        in_channels: 1,
                        out_channels: 2,
                        kernel: 3,
                    },
                ),
                LayerSpec::new("flatten", LayerKind::Flatten),
                LayerSpec::new(
                    "fc",
                    LayerKind::Dense {
                        inputs: 32,
                        outputs: 2,
                    },
                ),
            ],
        }
    }

    #[test]
    fn reference_shapes() {
        let net = Network::reference(
            InputShape {
                height: 32,
                width: 32,
                channels: 3,
            },
            3,
            0,
        )
        .unwrap();
        assert_eq!(net.explanation_layer_id(), "pool2");
        assert_eq!(
            net.explanation_shape(),
            Shape {
                channels: 16,
                height: 8,
                width: 8
            }
        );
        assert_eq!(net.num_params(), 224 + 1168 + 3075);
    }

    #[test]
    fn all_zero_tiny_image_sums_to_one() {
        let net = Network::reference(
            InputShape {
                height: 8,
                width: 8,
                channels: 1,
            },
            3,
            7,
        )
        .unwrap();
        let p = net.forward(&Array3::zeros((8, 8, 1))).unwrap();
        let sum: f64 = p.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_input_error() {
        let net = Network::new(tiny_arch(), None).unwrap();
        let err = net.forward(&Array3::zeros((5, 4, 1))).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn non_finite_activations_rejected() {
        let mut net = Network::new(tiny_arch(), None).unwrap();
        net.params_mut()[0] = f64::INFINITY;
        let err = net.forward(&Array3::from_elem((4, 4, 1), 1.0)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn rejects_bad_explanation_layer() {
        assert!(Network::new(tiny_arch(), Some("fc")).is_err());
        assert!(Network::new(tiny_arch(), Some("missing")).is_err());
        assert!(Network::new(tiny_arch(), Some("conv")).is_ok());
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut net = Network::new(tiny_arch(), None).unwrap();
        net.init_he(3);
        let img = Array3::from_shape_fn((4, 4, 1), |(y, x, _)| (y * 4 + x) as f64 / 16.0 - 0.3);
        let pred = net.forward(&img).unwrap();
        let p = net.params();
        for o in 0..2 {
            for y in 0..4i32 {
                for x in 0..4i32 {
                    let mut acc = p[18 + o];
                    for ky in 0..3i32 {
                        for kx in 0..3i32 {
                            let (sy, sx) = (y + ky - 1, x + kx - 1);
                            if (0..4).contains(&sy) && (0..4).contains(&sx) {
                                acc += p[o * 9 + (ky * 3 + kx) as usize]
                                    * img[[sy as usize, sx as usize, 0]];
                            }
                        }
                    }
                    let got = pred.activations.values[[o, y as usize, x as usize]];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn valid_range_edges() {
        assert_eq!(valid_range(-1, 4), (1, 4));
        assert_eq!(valid_range(1, 4), (0, 3));
        assert_eq!(valid_range(0, 4), (0, 4));
        assert_eq!(valid_range(5, 4), (0, 0));
    }
}
