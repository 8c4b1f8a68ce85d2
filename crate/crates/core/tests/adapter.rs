use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use saliencytune::model::{import_vgg_style, softmax, Activation, ExternalLayer, ExternalModel, InputShape};

fn conv(name: &str, rng: &mut ChaCha8Rng, k: usize, cin: usize, f: usize) -> ExternalLayer {
    ExternalLayer::Conv2D {
        name: name.into(),
        filters: f,
        kernel_size: k,
        kernel: (0..k * k * cin * f).map(|_| rng.random_range(-0.5..0.5)).collect(),
        bias: (0..f).map(|_| rng.random_range(-0.1..0.1)).collect(),
        activation: Activation::Relu,
    }
}

fn exported(seed: u64) -> ExternalModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ExternalModel {
        input: InputShape {
            height: 8,
            width: 8,
            channels: 3,
        },
        normalization: None,
        layers: vec![
            conv("block1_conv", &mut rng, 3, 3, 4),
            ExternalLayer::MaxPooling2D { name: "block1_pool".into() },
            conv("block2_conv", &mut rng, 3, 4, 6),
            ExternalLayer::MaxPooling2D { name: "block2_pool".into() },
            ExternalLayer::Flatten { name: "flatten".into() },
            ExternalLayer::Dense {
                name: "hidden".into(),
                units: 5,
                kernel: (0..24 * 5).map(|_| rng.random_range(-0.5..0.5)).collect(),
                bias: (0..5).map(|_| rng.random_range(-0.1..0.1)).collect(),
                activation: Activation::Relu,
            },
            ExternalLayer::Dense {
                name: "predictions".into(),
                units: 3,
                kernel: (0..5 * 3).map(|_| rng.random_range(-0.5..0.5)).collect(),
                bias: (0..3).map(|_| rng.random_range(-0.1..0.1)).collect(),
                activation: Activation::Softmax,
            },
        ],
    }
}

/// Straightforward channels-last evaluation in the exporter's own layout.
fn native_forward(model: &ExternalModel, image: &Array3<f64>) -> (Vec<f64>, Array3<f64>) {
    let mut x = image.clone();
    let mut flat: Vec<f64> = Vec::new();
    let mut last_conv = x.clone();
    for layer in &model.layers {
        match layer {
            ExternalLayer::Conv2D {
                filters,
                kernel_size: k,
                kernel,
                bias,
                activation,
                ..
            } => {
                let (h, w, c) = x.dim();
                let pad = (*k / 2) as isize;
                let mut out = Array3::zeros((h, w, *filters));
                for y in 0..h {
                    for xx in 0..w {
                        for o in 0..*filters {
                            let mut acc = bias[o];
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let (sy, sx) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    for i in 0..c {
                                        acc += kernel[((ky * k + kx) * c + i) * filters + o]
                                            * x[[sy as usize, sx as usize, i]];
                                    }
                                }
                            }
                            out[[y, xx, o]] = if *activation == Activation::Relu { acc.max(0.0) } else { acc };
                        }
                    }
                }
                x = out;
                last_conv = x.clone();
            }
            ExternalLayer::MaxPooling2D { .. } => {
                let (h, w, c) = x.dim();
                x = Array3::from_shape_fn((h / 2, w / 2, c), |(y, xx, ch)| {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x[[2 * y + dy, 2 * xx + dx, ch]]);
                        }
                    }
                    m
                });
            }
            ExternalLayer::Flatten { .. } => flat = x.iter().copied().collect(),
            ExternalLayer::Dense {
                units,
                kernel,
                bias,
                activation,
                ..
            } => {
                let out: Vec<f64> = (0..*units)
                    .map(|o| {
                        let z = bias[o] + flat.iter().enumerate().map(|(j, v)| kernel[j * units + o] * v).sum::<f64>();
                        if *activation == Activation::Relu {
                            z.max(0.0)
                        } else {
                            z
                        }
                    })
                    .collect();
                flat = out;
            }
        }
    }
    (softmax(&flat), last_conv)
}

#[test]
fn imported_forward_matches_native_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for seed in 0..5 {
        let model = exported(seed);
        let net = import_vgg_style(&model, None).unwrap();
        assert_eq!(net.explanation_layer_id(), "block2_conv");
        for _ in 0..4 {
            let image = Array3::from_shape_fn((8, 8, 3), |_| rng.random::<f64>());
            let (probs, act) = native_forward(&model, &image);
            let pred = net.forward(&image).unwrap();
            for (a, b) in probs.iter().zip(&pred.probabilities) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
            // channels-first view of the last conv block
            let (h, w, c) = act.dim();
            assert_eq!(pred.activations.values.dim(), (c, h, w));
            for ((k, y, x), v) in pred.activations.values.indexed_iter() {
                assert!((v - act[[y, x, k]]).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn json_round_trip_and_layer_choice() {
    let model = exported(7);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    std::fs::write(&path, serde_json::to_string(&model).unwrap()).unwrap();
    let loaded = ExternalModel::load(&path).unwrap();
    assert_eq!(loaded, model);
    let net = import_vgg_style(&loaded, Some("block1_conv")).unwrap();
    assert_eq!(net.explanation_shape().height, 8);
    assert!(import_vgg_style(&loaded, Some("hidden")).is_err());

    let mut bad = model.clone();
    if let ExternalLayer::Conv2D { bias, .. } = &mut bad.layers[0] {
        bias.pop();
    }
    assert!(import_vgg_style(&bad, None).is_err());
}
