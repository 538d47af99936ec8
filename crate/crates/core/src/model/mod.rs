//! Layer graph of a quantized CNN, its on-disk manifest, and labeled datasets.
//!
//! Layers are stored in topological order and indexed from 1; input index 0
//! denotes the external model input.

mod toy;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::{check_bit_width, QuantTensor};

pub use toy::{generate_toy_model, ToyArch};

/// Input index referring to the external model input.
pub const MODEL_INPUT: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvParams {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    pub out_scale_exp: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcParams {
    pub units: usize,
    pub out_scale_exp: i32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolParams {
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d(ConvParams),
    FullyConnected(FcParams),
    Relu,
    MaxPool(PoolParams),
    AvgPoolGlobal,
    ResidualAdd,
    Flatten,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d(_) => "conv2d",
            LayerKind::FullyConnected(_) => "fully_connected",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool(_) => "maxpool",
            LayerKind::AvgPoolGlobal => "avgpool_global",
            LayerKind::ResidualAdd => "residual_add",
            LayerKind::Flatten => "flatten",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(self, LayerKind::Conv2d(_) | LayerKind::FullyConnected(_))
    }

    fn arity(&self) -> usize {
        if matches!(self, LayerKind::ResidualAdd) {
            2
        } else {
            1
        }
    }

    fn params_json(&self) -> serde_json::Value {
        match self {
            LayerKind::Conv2d(p) => serde_json::to_value(p),
            LayerKind::FullyConnected(p) => serde_json::to_value(p),
            LayerKind::MaxPool(p) => serde_json::to_value(p),
            _ => Ok(serde_json::Value::Null),
        }
        .expect("params serialize")
    }

    fn from_manifest(kind: &str, params: &serde_json::Value) -> std::result::Result<Self, String> {
        fn parse<T: serde::de::DeserializeOwned>(v: &serde_json::Value) -> std::result::Result<T, String> {
            serde_json::from_value(v.clone()).map_err(|e| format!("bad params: {e}"))
        }
        let no_params = || {
            if params.is_null() || params.as_object().is_some_and(|o| o.is_empty()) {
                Ok(())
            } else {
                Err(format!("{kind} takes no params"))
            }
        };
        Ok(match kind {
            "conv2d" => LayerKind::Conv2d(parse(params)?),
            "fully_connected" => LayerKind::FullyConnected(parse(params)?),
            "maxpool" => LayerKind::MaxPool(parse(params)?),
            "relu" => no_params().map(|_| LayerKind::Relu)?,
            "avgpool_global" => no_params().map(|_| LayerKind::AvgPoolGlobal)?,
            "residual_add" => no_params().map(|_| LayerKind::ResidualAdd)?,
            "flatten" => no_params().map(|_| LayerKind::Flatten)?,
            other => return Err(format!("unsupported layer kind `{other}`")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub weights: Option<QuantTensor>,
    pub bias: Option<QuantTensor>,
    pub inputs: Vec<usize>,
}

impl LayerSpec {
    pub fn new(index: usize, kind: LayerKind, inputs: Vec<usize>) -> Self {
        Self {
            index,
            kind,
            weights: None,
            bias: None,
            inputs,
        }
    }

    pub fn with_weights(mut self, weights: QuantTensor, bias: Option<QuantTensor>) -> Self {
        self.weights = Some(weights);
        self.bias = bias;
        self
    }
}

/// A validated, immutable layer graph.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    name: String,
    input_shape: Vec<usize>,
    input_scale_exp: i32,
    bit_width: u32,
    num_classes: usize,
    layers: Vec<LayerSpec>,
    shapes: Vec<Vec<usize>>,
}

impl ModelGraph {
    pub fn new(
        name: impl Into<String>,
        input_shape: Vec<usize>,
        input_scale_exp: i32,
        bit_width: u32,
        num_classes: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        check_bit_width(bit_width).map_err(|e| Error::Model(e.to_string()))?;
        if num_classes == 0 {
            return Err(Error::Model("num_classes must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::Model("model has no layers".into()));
        }
        validate_structure(&layers, bit_width)?;
        let shapes = infer_shapes(&input_shape, &layers)?;
        let out_len: usize = shapes.last().map(|s| s.iter().product()).unwrap_or(0);
        if out_len != num_classes {
            return Err(Error::layer(
                layers.len(),
                format!("final output has {out_len} values but num_classes is {num_classes}"),
            ));
        }
        Ok(Self {
            name: name.into(),
            input_shape,
            input_scale_exp,
            bit_width,
            num_classes,
            layers,
            shapes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }
    pub fn input_scale_exp(&self) -> i32 {
        self.input_scale_exp
    }
    pub fn bit_width(&self) -> u32 {
        self.bit_width
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Layer by 1-based index.
    pub fn layer(&self, index: usize) -> &LayerSpec {
        &self.layers[index - 1]
    }

    /// Output shape of each layer, in layer order.
    pub fn output_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    fn input_shape_of(&self, producer: usize) -> &[usize] {
        if producer == MODEL_INPUT {
            &self.input_shape
        } else {
            &self.shapes[producer - 1]
        }
    }

    /// Multiply-accumulate count of a layer. Layers without weights count one
    /// operation per element touched so every layer has positive work.
    pub fn layer_macs(&self, index: usize) -> u64 {
        let layer = self.layer(index);
        let out: usize = self.shapes[index - 1].iter().product();
        let input: usize = self.input_shape_of(layer.inputs[0]).iter().product();
        let n = match layer.kind {
            LayerKind::Conv2d(p) => {
                let in_c = self.input_shape_of(layer.inputs[0])[0];
                out * in_c * p.kernel * p.kernel
            }
            LayerKind::FullyConnected(_) => out * input,
            LayerKind::MaxPool(p) => out * p.kernel * p.kernel,
            LayerKind::AvgPoolGlobal => input,
            LayerKind::Relu | LayerKind::ResidualAdd | LayerKind::Flatten => out,
        };
        n as u64
    }

    /// Bytes of stored parameters (weights plus bias) of a layer.
    pub fn layer_weight_bytes(&self, index: usize) -> u64 {
        let layer = self.layer(index);
        let elems = layer.weights.as_ref().map_or(0, |w| w.len()) + layer.bias.as_ref().map_or(0, |b| b.len());
        (elems as u64) * (self.bit_width as u64 / 8)
    }

    pub fn total_macs(&self) -> u64 {
        (1..=self.num_layers()).map(|l| self.layer_macs(l)).sum()
    }

    pub fn total_weight_bytes(&self) -> u64 {
        (1..=self.num_layers()).map(|l| self.layer_weight_bytes(l)).sum()
    }
}

fn validate_structure(layers: &[LayerSpec], bit_width: u32) -> Result<()> {
    let mut input_consumers = 0;
    for (pos, layer) in layers.iter().enumerate() {
        let idx = pos + 1;
        if layer.index != idx {
            return Err(Error::layer(
                idx,
                format!("index {} out of order (expected {idx})", layer.index),
            ));
        }
        if layer.inputs.len() != layer.kind.arity() {
            return Err(Error::layer(
                idx,
                format!(
                    "{} expects {} input(s), got {}",
                    layer.kind.name(),
                    layer.kind.arity(),
                    layer.inputs.len()
                ),
            ));
        }
        for &src in &layer.inputs {
            if src >= idx {
                return Err(Error::layer(idx, format!("dangling input index {src}")));
            }
        }
        if layer.inputs.contains(&MODEL_INPUT) {
            input_consumers += 1;
        }
        if layer.kind.has_weights() {
            let w = layer
                .weights
                .as_ref()
                .ok_or_else(|| Error::layer(idx, "missing weights"))?;
            if w.bit_width() != bit_width {
                return Err(Error::layer(
                    idx,
                    format!("weights are {}-bit, model is {bit_width}-bit", w.bit_width()),
                ));
            }
            if let Some(b) = &layer.bias {
                if b.bit_width() != bit_width {
                    return Err(Error::layer(idx, "bias bit width differs from model"));
                }
            }
        } else if layer.weights.is_some() || layer.bias.is_some() {
            return Err(Error::layer(
                idx,
                format!("{} layers take no weights", layer.kind.name()),
            ));
        }
    }
    if input_consumers != 1 {
        return Err(Error::Model(format!(
            "exactly one layer must consume the model input, found {input_consumers}"
        )));
    }
    Ok(())
}

fn pooled_dim(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || size + 2 * padding < kernel {
        return None;
    }
    Some((size + 2 * padding - kernel) / stride + 1)
}

fn infer_shapes(input_shape: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    if input_shape.is_empty() || input_shape.contains(&0) {
        return Err(Error::Model(format!("invalid input shape {input_shape:?}")));
    }
    let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
    for layer in layers {
        let idx = layer.index;
        let src = |i: usize| -> &[usize] {
            let p = layer.inputs[i];
            if p == MODEL_INPUT {
                input_shape
            } else {
                &shapes[p - 1]
            }
        };
        let input = src(0);
        let err = |m: String| Error::layer(idx, m);
        let out = match layer.kind {
            LayerKind::Conv2d(p) => {
                let [c, h, w] = input else {
                    return Err(err(format!("conv2d needs a CxHxW input, got {input:?}")));
                };
                let weights = layer.weights.as_ref().expect("validated");
                let expected = [p.out_channels, *c, p.kernel, p.kernel];
                if weights.shape() != expected {
                    return Err(err(format!(
                        "weight shape {:?} does not match {expected:?}",
                        weights.shape()
                    )));
                }
                check_bias(layer, p.out_channels)?;
                let ho = pooled_dim(*h, p.kernel, p.stride, p.padding);
                let wo = pooled_dim(*w, p.kernel, p.stride, p.padding);
                match (ho, wo) {
                    (Some(ho), Some(wo)) if p.out_channels > 0 => vec![p.out_channels, ho, wo],
                    _ => return Err(err("conv2d output has non-positive dims".into())),
                }
            }
            LayerKind::FullyConnected(p) => {
                let n: usize = input.iter().product();
                let weights = layer.weights.as_ref().expect("validated");
                if weights.shape() != [p.units, n] {
                    return Err(err(format!(
                        "weight shape {:?} does not match [{}, {n}]",
                        weights.shape(),
                        p.units
                    )));
                }
                check_bias(layer, p.units)?;
                if p.units == 0 {
                    return Err(err("fully_connected needs positive units".into()));
                }
                vec![p.units]
            }
            LayerKind::Relu => input.to_vec(),
            LayerKind::MaxPool(p) => {
                let [c, h, w] = input else {
                    return Err(err(format!("maxpool needs a CxHxW input, got {input:?}")));
                };
                match (
                    pooled_dim(*h, p.kernel, p.stride, 0),
                    pooled_dim(*w, p.kernel, p.stride, 0),
                ) {
                    (Some(ho), Some(wo)) => vec![*c, ho, wo],
                    _ => return Err(err("maxpool output has non-positive dims".into())),
                }
            }
            LayerKind::AvgPoolGlobal => {
                let [c, _, _] = input else {
                    return Err(err(format!("avgpool_global needs a CxHxW input, got {input:?}")));
                };
                vec![*c, 1, 1]
            }
            LayerKind::ResidualAdd => {
                let other = src(1);
                if input != other {
                    return Err(err(format!(
                        "residual_add inputs have mismatched shapes {input:?} and {other:?}"
                    )));
                }
                input.to_vec()
            }
            LayerKind::Flatten => vec![input.iter().product()],
        };
        shapes.push(out);
    }
    Ok(shapes)
}

fn check_bias(layer: &LayerSpec, channels: usize) -> Result<()> {
    match &layer.bias {
        Some(b) if b.shape() != [channels] => Err(Error::layer(
            layer.index,
            format!("bias shape {:?} does not match [{channels}]", b.shape()),
        )),
        _ => Ok(()),
    }
}

/// Per-layer output shapes of `model`.
pub fn shape_inference(model: &ModelGraph) -> Vec<Vec<usize>> {
    model.output_shapes().to_vec()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    name: String,
    input_shape: Vec<usize>,
    input_scale_exp: i32,
    bit_width: u32,
    num_classes: usize,
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLayer {
    index: usize,
    kind: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    params: serde_json::Value,
    inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_file: Option<String>,
}

/// Reads a model manifest (JSON) and resolves its tensor files relative to
/// the manifest's directory.
pub fn load_model(path: &Path) -> Result<ModelGraph> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for entry in &manifest.layers {
        let kind = LayerKind::from_manifest(&entry.kind, &entry.params).map_err(|m| Error::layer(entry.index, m))?;
        let load = |f: &Option<String>| -> Result<Option<QuantTensor>> {
            f.as_ref()
                .map(|f| QuantTensor::load(&base.join(f)).map_err(|e| Error::layer(entry.index, e.to_string())))
                .transpose()
        };
        layers.push(LayerSpec {
            index: entry.index,
            kind,
            weights: load(&entry.weight_file)?,
            bias: load(&entry.bias_file)?,
            inputs: entry.inputs.clone(),
        });
    }
    ModelGraph::new(
        manifest.name,
        manifest.input_shape,
        manifest.input_scale_exp,
        manifest.bit_width,
        manifest.num_classes,
        layers,
    )
}

/// Writes `model.json` plus `weights/*.afqt` into `dir`; returns the manifest path.
pub fn save_model(model: &ModelGraph, dir: &Path) -> Result<PathBuf> {
    let wdir = dir.join("weights");
    std::fs::create_dir_all(&wdir).map_err(|e| Error::io(&wdir, e))?;
    let mut layers = Vec::with_capacity(model.num_layers());
    for layer in model.layers() {
        let save = |t: &Option<QuantTensor>, suffix: &str| -> Result<Option<String>> {
            match t {
                Some(t) => {
                    let rel = format!("weights/l{}_{suffix}.afqt", layer.index);
                    t.save(&dir.join(&rel))?;
                    Ok(Some(rel))
                }
                None => Ok(None),
            }
        };
        layers.push(ManifestLayer {
            index: layer.index,
            kind: layer.kind.name().to_string(),
            params: layer.kind.params_json(),
            inputs: layer.inputs.clone(),
            weight_file: save(&layer.weights, "w")?,
            bias_file: save(&layer.bias, "b")?,
        });
    }
    let manifest = Manifest {
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        input_scale_exp: model.input_scale_exp,
        bit_width: model.bit_width,
        num_classes: model.num_classes,
        layers,
    };
    let path = dir.join("model.json");
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: QuantTensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        Ok(Self {
            name: name.into(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// First `n` samples (or all of them when `n` is larger).
    pub fn subset(&self, n: usize) -> Result<Self> {
        Self::new(self.name.clone(), self.samples.iter().take(n).cloned().collect())
    }

    /// First `n` samples and the rest, both non-empty.
    pub fn split(&self, n: usize) -> Result<(Self, Self)> {
        let (a, b) = self.samples.split_at(n.min(self.samples.len()));
        Ok((
            Self::new(self.name.clone(), a.to_vec())?,
            Self::new(self.name.clone(), b.to_vec())?,
        ))
    }

    pub fn check_against(&self, model: &ModelGraph) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= model.num_classes() {
                return Err(Error::Dataset(format!(
                    "sample {i}: label {} >= num_classes {}",
                    s.label,
                    model.num_classes()
                )));
            }
            if s.input.shape() != model.input_shape() {
                return Err(Error::Dataset(format!(
                    "sample {i}: shape {:?} does not match model input {:?}",
                    s.input.shape(),
                    model.input_shape()
                )));
            }
        }
        Ok(())
    }

    /// Writes `sample_NNNNN.afqt` files plus `labels.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut labels = String::from("sample_id,label\n");
        for (i, s) in self.samples.iter().enumerate() {
            s.input.save(&dir.join(format!("sample_{i:05}.afqt")))?;
            labels.push_str(&format!("{i},{}\n", s.label));
        }
        let path = dir.join("labels.csv");
        std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("labels.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("sample_id,label") {
            return Err(Error::Dataset(format!(
                "{}: expected header `sample_id,label`",
                path.display()
            )));
        }
        let mut entries = BTreeMap::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Dataset(format!("{} line {}: `{line}`", path.display(), n + 2));
            let (id, label) = line.split_once(',').ok_or_else(bad)?;
            let id: usize = id.trim().parse().map_err(|_| bad())?;
            let label: usize = label.trim().parse().map_err(|_| bad())?;
            if entries.insert(id, label).is_some() {
                return Err(Error::Dataset(format!("duplicate sample id {id}")));
            }
        }
        let samples = entries
            .into_iter()
            .map(|(id, label)| {
                let input = QuantTensor::load(&dir.join(format!("sample_{id:05}.afqt")))?;
                Ok(Sample { input, label })
            })
            .collect::<Result<Vec<_>>>()?;
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::new(name, samples)
    }
}
