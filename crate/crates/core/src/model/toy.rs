//! Desk-scale CNNs with analytically constructed weights and a matching
//! synthetic line-orientation dataset.
//!
//! Each image is 8x8 and contains one bright line (horizontal, vertical,
//! diagonal or anti-diagonal) over Gaussian background noise. The first conv
//! layer holds four zero-sum 3x3 line detectors, one per orientation, so the
//! detector matching the line fires and the others cancel. Pooling then turns
//! the per-channel response into one logit per class.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ConvParams, LabeledDataset, LayerKind, LayerSpec, ModelGraph, PoolParams, Sample};
use crate::quant::{quantize, RngStream};

pub const TOY_BIT_WIDTH: u32 = 16;
const SIDE: usize = 8;
const CLASSES: usize = 4;
const SAMPLES: usize = 256;
const INPUT_SCALE_EXP: i32 = -4;
const WEIGHT_SCALE_EXP: i32 = -6;
const ACT_SCALE_EXP: i32 = -2;
const NOISE_SIGMA: f64 = 0.35;
const DATASET_STREAM: u64 = 0x746f_795f_6461_7461;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyArch {
    TinyCnn,
    TinyResnet,
}

impl ToyArch {
    pub fn name(&self) -> &'static str {
        match self {
            ToyArch::TinyCnn => "tiny_cnn",
            ToyArch::TinyResnet => "tiny_resnet",
        }
    }
}

impl std::str::FromStr for ToyArch {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny_cnn" => Ok(ToyArch::TinyCnn),
            "tiny_resnet" => Ok(ToyArch::TinyResnet),
            other => Err(format!("unknown toy architecture `{other}`")),
        }
    }
}

/// Builds the toy model and its companion dataset. Weights are fixed; `seed`
/// drives the dataset draw.
pub fn generate_toy_model(arch: ToyArch, seed: u64) -> (ModelGraph, LabeledDataset) {
    let layers = match arch {
        ToyArch::TinyCnn => tiny_cnn_layers(),
        ToyArch::TinyResnet => tiny_resnet_layers(),
    };
    let model = ModelGraph::new(
        arch.name(),
        vec![1, SIDE, SIDE],
        INPUT_SCALE_EXP,
        TOY_BIT_WIDTH,
        CLASSES,
        layers,
    )
    .expect("toy model is valid by construction");
    let dataset = line_dataset(arch.name(), seed);
    (model, dataset)
}

fn conv(out_channels: usize) -> LayerKind {
    LayerKind::Conv2d(ConvParams {
        out_channels,
        kernel: 3,
        stride: 1,
        padding: 1,
        out_scale_exp: ACT_SCALE_EXP,
    })
}

/// Four 3x3 detectors: +2 on the line through the centre, -1 elsewhere.
fn line_detectors() -> LayerSpec {
    let mut w = vec![-1.0; CLASSES * 9];
    for class in 0..CLASSES {
        for t in 0..3 {
            let (r, c) = match class {
                0 => (1, t),
                1 => (t, 1),
                2 => (t, t),
                _ => (t, 2 - t),
            };
            w[class * 9 + r * 3 + c] = 2.0;
        }
    }
    let weights = quantize(&w, vec![CLASSES, 1, 3, 3], TOY_BIT_WIDTH, WEIGHT_SCALE_EXP).unwrap();
    LayerSpec::new(1, conv(CLASSES), vec![0]).with_weights(weights, None)
}

/// Channel-diagonal 3x3 smoothing: `centre` at the middle, `edge` on the four
/// direct neighbours, zero across channels.
fn smoothing(index: usize, input: usize, centre: f64, edge: f64) -> LayerSpec {
    let mut w = vec![0.0; CLASSES * CLASSES * 9];
    for c in 0..CLASSES {
        let base = (c * CLASSES + c) * 9;
        w[base + 4] = centre;
        for k in [1, 3, 5, 7] {
            w[base + k] = edge;
        }
    }
    let weights = quantize(&w, vec![CLASSES, CLASSES, 3, 3], TOY_BIT_WIDTH, WEIGHT_SCALE_EXP).unwrap();
    LayerSpec::new(index, conv(CLASSES), vec![input]).with_weights(weights, None)
}

fn tiny_cnn_layers() -> Vec<LayerSpec> {
    vec![
        line_detectors(),
        LayerSpec::new(2, LayerKind::Relu, vec![1]),
        LayerSpec::new(3, LayerKind::MaxPool(PoolParams { kernel: 2, stride: 2 }), vec![2]),
        smoothing(4, 3, 1.0, 0.5),
        LayerSpec::new(5, LayerKind::AvgPoolGlobal, vec![4]),
        LayerSpec::new(6, LayerKind::Flatten, vec![5]),
    ]
}

fn tiny_resnet_layers() -> Vec<LayerSpec> {
    vec![
        line_detectors(),
        LayerSpec::new(2, LayerKind::Relu, vec![1]),
        smoothing(3, 2, 0.5, 0.25),
        LayerSpec::new(4, LayerKind::ResidualAdd, vec![2, 3]),
        LayerSpec::new(5, LayerKind::Relu, vec![4]),
        LayerSpec::new(6, LayerKind::MaxPool(PoolParams { kernel: 2, stride: 2 }), vec![5]),
        LayerSpec::new(7, LayerKind::AvgPoolGlobal, vec![6]),
        LayerSpec::new(8, LayerKind::Flatten, vec![7]),
    ]
}

fn line_dataset(name: &str, seed: u64) -> LabeledDataset {
    let mut rng = RngStream::new(seed, DATASET_STREAM).rng();
    let noise = Normal::new(0.0, NOISE_SIGMA).unwrap();
    let samples = (0..SAMPLES)
        .map(|i| {
            let label = i % CLASSES;
            let mut img = [0.0f64; SIDE * SIDE];
            for px in img.iter_mut() {
                *px = noise.sample(&mut rng);
            }
            let amplitude = rng.random_range(0.8..1.2);
            match label {
                0 | 1 => {
                    let k = rng.random_range(1..SIDE - 1);
                    for t in 0..SIDE {
                        let (r, c) = if label == 0 { (k, t) } else { (t, k) };
                        img[r * SIDE + c] += amplitude;
                    }
                }
                _ => {
                    let offset = rng.random_range(-2i64..=2);
                    for r in 0..SIDE as i64 {
                        let c = if label == 2 {
                            r + offset
                        } else {
                            SIDE as i64 - 1 - r + offset
                        };
                        if (0..SIDE as i64).contains(&c) {
                            img[r as usize * SIDE + c as usize] += amplitude;
                        }
                    }
                }
            }
            let input = quantize(&img, vec![1, SIDE, SIDE], TOY_BIT_WIDTH, INPUT_SCALE_EXP).unwrap();
            Sample { input, label }
        })
        .collect();
    LabeledDataset::new(format!("{name}_lines"), samples).expect("non-empty")
}
