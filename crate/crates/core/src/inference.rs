//! Integer forward pass with optional bit-flip injection, and Top-1 accuracy.
//!
//! Convolutions and dense layers accumulate in `i64`, then requantize to the
//! layer's output scale with a round-half-to-even shift and saturate to the
//! model bit width.

use std::borrow::Cow;
use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConvParams, LabeledDataset, LayerKind, LayerSpec, ModelGraph, PoolParams, MODEL_INPUT};
use crate::quant::{
    div_round_half_even, inject_faults_budgeted, saturate, shift_round_half_even, QuantTensor, RngStream,
};

/// Concrete injection instructions for one faulty evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub weight_targets: BTreeSet<usize>,
    pub activation_targets: BTreeSet<usize>,
    pub fault_rate_act: f64,
    pub fault_rate_weight: f64,
    pub faulty_bits: u32,
    /// Maximum flips per forward pass.
    pub budget: Option<u64>,
    pub rng: RngStream,
}

impl FaultPlan {
    pub fn validate(&self, model: &ModelGraph) -> Result<()> {
        let l = model.num_layers();
        for &t in self.weight_targets.iter().chain(&self.activation_targets) {
            if t == 0 || t > l {
                return Err(Error::InvalidArgument(format!("fault target {t} outside 1..={l}")));
            }
        }
        for r in [self.fault_rate_act, self.fault_rate_weight] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("fault rate {r} outside [0, 1]")));
            }
        }
        if self.faulty_bits == 0 || self.faulty_bits > model.bit_width() {
            return Err(Error::InvalidArgument(format!(
                "faulty bits {} outside [1, {}]",
                self.faulty_bits,
                model.bit_width()
            )));
        }
        Ok(())
    }

    /// True when no flip can ever be applied.
    pub fn is_inert(&self) -> bool {
        let act = self.fault_rate_act == 0.0 || self.activation_targets.is_empty();
        let wt = self.fault_rate_weight == 0.0 || self.weight_targets.is_empty();
        (act && wt) || self.budget == Some(0)
    }

    pub fn with_stream(&self, rng: RngStream) -> Self {
        Self { rng, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub top1: f64,
    pub correct: usize,
    pub total: usize,
    pub flips_applied: u64,
}

struct Injector<'p> {
    plan: &'p FaultPlan,
    rng: ChaCha8Rng,
    remaining: Option<u64>,
    flips: u64,
}

impl Injector<'_> {
    fn corrupt(&mut self, t: &QuantTensor, rate: f64) -> Result<QuantTensor> {
        let (out, n) = inject_faults_budgeted(t, rate, self.plan.faulty_bits, &mut self.rng, self.remaining.as_mut())?;
        self.flips += n;
        Ok(out)
    }
}

/// Runs `model` on `input`, returning the last layer's output (the logits).
pub fn forward(model: &ModelGraph, input: &QuantTensor, plan: Option<&FaultPlan>) -> Result<QuantTensor> {
    forward_counted(model, input, plan).map(|(logits, _)| logits)
}

/// As [`forward`], also returning the number of bit flips applied.
pub fn forward_counted(
    model: &ModelGraph,
    input: &QuantTensor,
    plan: Option<&FaultPlan>,
) -> Result<(QuantTensor, u64)> {
    if input.shape() != model.input_shape() {
        return Err(Error::InvalidArgument(format!(
            "input shape {:?} does not match model input {:?}",
            input.shape(),
            model.input_shape()
        )));
    }
    if input.bit_width() != model.bit_width() {
        return Err(Error::InvalidArgument(format!(
            "input is {}-bit, model is {}-bit",
            input.bit_width(),
            model.bit_width()
        )));
    }
    let mut injector = match plan {
        Some(p) => {
            p.validate(model)?;
            Some(Injector {
                plan: p,
                rng: p.rng.rng(),
                remaining: p.budget,
                flips: 0,
            })
        }
        None => None,
    };

    let mut outputs: Vec<QuantTensor> = Vec::with_capacity(model.num_layers());
    for layer in model.layers() {
        let fetch = |src: usize| -> &QuantTensor {
            if src == MODEL_INPUT {
                input
            } else {
                &outputs[src - 1]
            }
        };
        let mut inputs: Vec<Cow<'_, QuantTensor>> = layer.inputs.iter().map(|&s| Cow::Borrowed(fetch(s))).collect();
        let mut weights = layer.weights.as_ref().map(Cow::Borrowed);

        if let Some(inj) = injector.as_mut() {
            let plan = inj.plan;
            if plan.activation_targets.contains(&layer.index) && plan.fault_rate_act > 0.0 {
                for slot in inputs.iter_mut() {
                    *slot = Cow::Owned(inj.corrupt(slot, plan.fault_rate_act)?);
                }
            }
            if plan.weight_targets.contains(&layer.index) && plan.fault_rate_weight > 0.0 {
                if let Some(w) = weights.as_mut() {
                    *w = Cow::Owned(inj.corrupt(w, plan.fault_rate_weight)?);
                }
            }
        }

        let out = run_layer(
            layer,
            &inputs,
            weights.as_deref(),
            model.bit_width(),
            &model.output_shapes()[layer.index - 1],
        );
        outputs.push(out);
    }
    let flips = injector.map_or(0, |i| i.flips);
    Ok((outputs.pop().expect("model has layers"), flips))
}

fn run_layer(
    layer: &LayerSpec,
    inputs: &[Cow<'_, QuantTensor>],
    weights: Option<&QuantTensor>,
    bit_width: u32,
    out_shape: &[usize],
) -> QuantTensor {
    let x = &inputs[0];
    match layer.kind {
        LayerKind::Conv2d(p) => conv2d(
            x,
            weights.expect("validated"),
            layer.bias.as_ref(),
            &p,
            bit_width,
            out_shape,
        ),
        LayerKind::FullyConnected(p) => dense(
            x,
            weights.expect("validated"),
            layer.bias.as_ref(),
            p.out_scale_exp,
            bit_width,
        ),
        LayerKind::Relu => {
            let v = x.values().iter().map(|&v| v.max(0)).collect();
            QuantTensor::from_parts_unchecked(x.shape().to_vec(), v, bit_width, x.scale_exp())
        }
        LayerKind::MaxPool(p) => maxpool(x, &p, out_shape),
        LayerKind::AvgPoolGlobal => avgpool_global(x),
        LayerKind::ResidualAdd => residual_add(x, &inputs[1], bit_width),
        LayerKind::Flatten => {
            QuantTensor::from_parts_unchecked(out_shape.to_vec(), x.values().to_vec(), bit_width, x.scale_exp())
        }
    }
}

fn bias_in_acc_units(bias: Option<&QuantTensor>, acc_scale: i32, channel: usize) -> i64 {
    bias.map_or(0, |b| {
        shift_round_half_even(b.values()[channel] as i64, acc_scale - b.scale_exp())
    })
}

fn conv2d(
    x: &QuantTensor,
    w: &QuantTensor,
    bias: Option<&QuantTensor>,
    p: &ConvParams,
    bit_width: u32,
    out_shape: &[usize],
) -> QuantTensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = p.kernel;
    let acc_scale = x.scale_exp() + w.scale_exp();
    let shift = p.out_scale_exp - acc_scale;
    let xv = x.values();
    let wv = w.values();
    let mut out = Vec::with_capacity(c_out * ho * wo);
    for oc in 0..c_out {
        let b = bias_in_acc_units(bias, acc_scale, oc);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b;
                for ic in 0..c_in {
                    for ky in 0..k {
                        let iy = (oy * p.stride + ky) as isize - p.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * p.stride + kx) as isize - p.padding as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            let xi = (ic * h + iy as usize) * wd + ix as usize;
                            let wi = ((oc * c_in + ic) * k + ky) * k + kx;
                            acc += xv[xi] as i64 * wv[wi] as i64;
                        }
                    }
                }
                out.push(saturate(shift_round_half_even(acc, shift), bit_width));
            }
        }
    }
    QuantTensor::from_parts_unchecked(out_shape.to_vec(), out, bit_width, p.out_scale_exp)
}

fn dense(
    x: &QuantTensor,
    w: &QuantTensor,
    bias: Option<&QuantTensor>,
    out_scale_exp: i32,
    bit_width: u32,
) -> QuantTensor {
    let n = x.len();
    let units = w.shape()[0];
    let acc_scale = x.scale_exp() + w.scale_exp();
    let shift = out_scale_exp - acc_scale;
    let out = (0..units)
        .map(|u| {
            let row = &w.values()[u * n..(u + 1) * n];
            let acc = row
                .iter()
                .zip(x.values())
                .fold(bias_in_acc_units(bias, acc_scale, u), |a, (&wi, &xi)| {
                    a + wi as i64 * xi as i64
                });
            saturate(shift_round_half_even(acc, shift), bit_width)
        })
        .collect();
    QuantTensor::from_parts_unchecked(vec![units], out, bit_width, out_scale_exp)
}

fn maxpool(x: &QuantTensor, p: &PoolParams, out_shape: &[usize]) -> QuantTensor {
    let (h, wd) = (x.shape()[1], x.shape()[2]);
    let (c, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
    let xv = x.values();
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = i32::MIN;
                for ky in 0..p.kernel {
                    for kx in 0..p.kernel {
                        let (iy, ix) = (oy * p.stride + ky, ox * p.stride + kx);
                        m = m.max(xv[(ch * h + iy) * wd + ix]);
                    }
                }
                out.push(m);
            }
        }
    }
    QuantTensor::from_parts_unchecked(out_shape.to_vec(), out, x.bit_width(), x.scale_exp())
}

fn avgpool_global(x: &QuantTensor) -> QuantTensor {
    let c = x.shape()[0];
    let area = x.len() / c;
    let out = x
        .values()
        .chunks(area)
        .map(|plane| {
            let sum: i64 = plane.iter().map(|&v| v as i64).sum();
            div_round_half_even(sum, area as i64) as i32
        })
        .collect();
    QuantTensor::from_parts_unchecked(vec![c, 1, 1], out, x.bit_width(), x.scale_exp())
}

/// Adds `b` to `a` in `a`'s scale.
fn residual_add(a: &QuantTensor, b: &QuantTensor, bit_width: u32) -> QuantTensor {
    let shift = a.scale_exp() - b.scale_exp();
    let out = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| saturate(x as i64 + shift_round_half_even(y as i64, shift), bit_width))
        .collect();
    QuantTensor::from_parts_unchecked(a.shape().to_vec(), out, bit_width, a.scale_exp())
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(logits: &QuantTensor) -> usize {
    let mut best = 0;
    for (i, &v) in logits.values().iter().enumerate() {
        if v > logits.values()[best] {
            best = i;
        }
    }
    best
}

/// Per-sample correctness and flip count. Sample `i` draws faults from
/// `plan.rng.derive(i)`, so the result does not depend on evaluation order.
pub fn predict_all(model: &ModelGraph, dataset: &LabeledDataset, plan: Option<&FaultPlan>) -> Result<Vec<(bool, u64)>> {
    if dataset.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
    }
    dataset.check_against(model)?;
    if let Some(p) = plan {
        p.validate(model)?;
    }
    dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let sample_plan = plan.map(|p| p.with_stream(p.rng.derive(i as u64)));
            let (logits, flips) = forward_counted(model, &s.input, sample_plan.as_ref())?;
            Ok((argmax(&logits) == s.label, flips))
        })
        .collect()
}

pub fn evaluate_accuracy(
    model: &ModelGraph,
    dataset: &LabeledDataset,
    plan: Option<&FaultPlan>,
) -> Result<AccuracyReport> {
    let results = predict_all(model, dataset, plan)?;
    let correct = results.iter().filter(|(ok, _)| *ok).count();
    let total = results.len();
    Ok(AccuracyReport {
        top1: correct as f64 / total as f64,
        correct,
        total,
        flips_applied: results.iter().map(|(_, f)| f).sum(),
    })
}

/// Clean Top-1 minus faulty Top-1 on `dataset`.
pub fn accuracy_drop(model: &ModelGraph, dataset: &LabeledDataset, plan: &FaultPlan) -> Result<f64> {
    let clean = evaluate_accuracy(model, dataset, None)?;
    let faulty = evaluate_accuracy(model, dataset, Some(plan))?;
    Ok(clean.top1 - faulty.top1)
}
