//! Turning a fault configuration and a partition into a concrete
//! [`FaultPlan`], plus per-device resource feasibility.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::FaultPlan;
use crate::model::ModelGraph;
use crate::partition::Partition;
use crate::quant::{check_bit_width, RngStream};

/// Which layers receive faults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InjectionStrategy {
    /// One layer at a time (1-based index).
    LayerSweep {
        layer: usize,
    },
    /// Every layer mapped to `device`.
    PlatformSpecific {
        device: usize,
    },
    /// Every layer mapped to a device flagged `fault_prone` in the catalog.
    FaultProneDevices,
    AllLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    #[serde(default = "default_precision")]
    pub precision: u32,
    /// `[activation, weight]` per-bit flip probabilities.
    #[serde(default = "default_rates")]
    pub fault_rates: [f64; 2],
    #[serde(default = "default_faulty_bits")]
    pub faulty_bits: u32,
    #[serde(default)]
    pub budget: Option<u64>,
    #[serde(default = "default_strategy")]
    pub strategy: InjectionStrategy,
    #[serde(default)]
    pub seed: u64,
}

fn default_precision() -> u32 {
    16
}
fn default_rates() -> [f64; 2] {
    [0.2, 0.2]
}
fn default_faulty_bits() -> u32 {
    4
}
fn default_strategy() -> InjectionStrategy {
    InjectionStrategy::FaultProneDevices
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            precision: default_precision(),
            fault_rates: default_rates(),
            faulty_bits: default_faulty_bits(),
            budget: None,
            strategy: default_strategy(),
            seed: 0,
        }
    }
}

impl FaultConfig {
    pub fn activation_rate(&self) -> f64 {
        self.fault_rates[0]
    }

    pub fn weight_rate(&self) -> f64 {
        self.fault_rates[1]
    }

    pub fn with_rates(&self, activation: f64, weight: f64) -> Self {
        Self {
            fault_rates: [activation, weight],
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bit_width(self.precision)?;
        for r in self.fault_rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidArgument(format!("fault rate {r} outside [0, 1]")));
            }
        }
        if self.faulty_bits == 0 || self.faulty_bits > self.precision {
            return Err(Error::InvalidArgument(format!(
                "faulty_bits {} outside [1, {}]",
                self.faulty_bits, self.precision
            )));
        }
        Ok(())
    }

    pub fn is_fault_free(&self) -> bool {
        self.fault_rates == [0.0, 0.0]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Device {
    pub name: String,
    #[serde(default)]
    pub fault_prone: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_macs: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_weight_bytes: Option<u64>,
}

impl Device {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            fault_prone: false,
            max_macs: None,
            max_weight_bytes: None,
        }
    }

    pub fn fault_prone(mut self) -> Self {
        self.fault_prone = true;
        self
    }

    pub fn with_caps(mut self, max_macs: Option<u64>, max_weight_bytes: Option<u64>) -> Self {
        self.max_macs = max_macs;
        self.max_weight_bytes = max_weight_bytes;
        self
    }
}

/// Device ids are positions in `devices`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceCatalog {
    pub devices: Vec<Device>,
}

impl DeviceCatalog {
    pub fn new(devices: Vec<Device>) -> Result<Self> {
        if devices.is_empty() {
            return Err(Error::InvalidArgument(
                "device catalog must list at least one device".into(),
            ));
        }
        Ok(Self { devices })
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    /// Two uncapped devices, device 0 fault-prone.
    pub fn edge_pair() -> Self {
        Self {
            devices: vec![Device::new("edge-npu").fault_prone(), Device::new("hardened-dsp")],
        }
    }
}

pub fn build_fault_plan(
    config: &FaultConfig,
    partition: &Partition,
    catalog: &DeviceCatalog,
    eval_id: u64,
) -> Result<FaultPlan> {
    config.validate()?;
    let l = partition.num_layers();
    if let Some(&d) = partition.assignment().iter().find(|&&d| d >= catalog.len()) {
        return Err(Error::InvalidArgument(format!(
            "partition uses device {d}, catalog has {}",
            catalog.len()
        )));
    }
    let targets: BTreeSet<usize> = match config.strategy {
        InjectionStrategy::LayerSweep { layer } => {
            if layer == 0 || layer > l {
                return Err(Error::InvalidArgument(format!("sweep layer {layer} outside 1..={l}")));
            }
            [layer].into()
        }
        InjectionStrategy::PlatformSpecific { device } => {
            if device >= catalog.len() {
                return Err(Error::InvalidArgument(format!(
                    "device {device} not in catalog of {}",
                    catalog.len()
                )));
            }
            partition.layers_on(device).collect()
        }
        InjectionStrategy::FaultProneDevices => (1..=l)
            .filter(|&layer| catalog.devices[partition.device_of(layer)].fault_prone)
            .collect(),
        InjectionStrategy::AllLayers => (1..=l).collect(),
    };
    Ok(FaultPlan {
        weight_targets: targets.clone(),
        activation_targets: targets,
        fault_rate_act: config.activation_rate(),
        fault_rate_weight: config.weight_rate(),
        faulty_bits: config.faulty_bits,
        budget: config.budget,
        rng: RngStream::new(config.seed, eval_id),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resource {
    Macs,
    WeightBytes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceUsage {
    pub device: usize,
    pub macs: u64,
    pub weight_bytes: u64,
    pub macs_utilization: Option<f64>,
    pub weight_utilization: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub device: usize,
    pub device_name: String,
    pub resource: Resource,
    pub used: u64,
    pub cap: u64,
}

impl Violation {
    /// Excess relative to the cap.
    pub fn excess(&self) -> f64 {
        if self.cap == 0 {
            self.used as f64
        } else {
            (self.used - self.cap) as f64 / self.cap as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceVerdict {
    pub feasible: bool,
    pub usage: Vec<DeviceUsage>,
    pub violations: Vec<Violation>,
}

impl ResourceVerdict {
    /// Sum of relative excesses; zero when feasible.
    pub fn total_violation(&self) -> f64 {
        self.violations.iter().map(Violation::excess).fold(0.0, |a, b| a + b)
    }
}

pub fn check_resource_constraints(
    partition: &Partition,
    model: &ModelGraph,
    catalog: &DeviceCatalog,
) -> ResourceVerdict {
    let mut usage: Vec<DeviceUsage> = (0..catalog.len())
        .map(|device| DeviceUsage {
            device,
            macs: 0,
            weight_bytes: 0,
            macs_utilization: None,
            weight_utilization: None,
        })
        .collect();
    for layer in 1..=partition.num_layers().min(model.num_layers()) {
        let u = &mut usage[partition.device_of(layer)];
        u.macs += model.layer_macs(layer);
        u.weight_bytes += model.layer_weight_bytes(layer);
    }
    let mut violations = Vec::new();
    for (u, dev) in usage.iter_mut().zip(&catalog.devices) {
        let mut check = |used: u64, cap: Option<u64>, resource| {
            let cap = cap?;
            if used > cap {
                violations.push(Violation {
                    device: u.device,
                    device_name: dev.name.clone(),
                    resource,
                    used,
                    cap,
                });
            }
            Some(if cap == 0 {
                f64::INFINITY
            } else {
                used as f64 / cap as f64
            })
        };
        u.macs_utilization = check(u.macs, dev.max_macs, Resource::Macs);
        u.weight_utilization = check(u.weight_bytes, dev.max_weight_bytes, Resource::WeightBytes);
    }
    ResourceVerdict {
        feasible: violations.is_empty(),
        usage,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_toy_model, ToyArch};

    fn p(genes: &[usize]) -> Partition {
        Partition::new(genes.to_vec(), 2).unwrap()
    }

    fn cfg(strategy: InjectionStrategy) -> FaultConfig {
        FaultConfig {
            strategy,
            ..FaultConfig::default()
        }
    }

    #[test]
    fn layer_sweep_targets_single_layer() {
        let plan = build_fault_plan(
            &cfg(InjectionStrategy::LayerSweep { layer: 3 }),
            &p(&[0; 6]),
            &DeviceCatalog::edge_pair(),
            1,
        )
        .unwrap();
        assert_eq!(plan.weight_targets, [3].into());
        assert_eq!(plan.activation_targets, [3].into());
        assert!(build_fault_plan(
            &cfg(InjectionStrategy::LayerSweep { layer: 7 }),
            &p(&[0; 6]),
            &DeviceCatalog::edge_pair(),
            1
        )
        .is_err());
    }

    #[test]
    fn platform_specific_filters_by_device() {
        let plan = build_fault_plan(
            &cfg(InjectionStrategy::PlatformSpecific { device: 1 }),
            &p(&[0, 0, 1, 1, 1, 0]),
            &DeviceCatalog::edge_pair(),
            1,
        )
        .unwrap();
        assert_eq!(plan.weight_targets, [3, 4, 5].into());
        assert!(build_fault_plan(
            &cfg(InjectionStrategy::PlatformSpecific { device: 2 }),
            &p(&[0; 6]),
            &DeviceCatalog::edge_pair(),
            1
        )
        .is_err());
    }

    #[test]
    fn all_layers_and_fault_prone() {
        let plan = build_fault_plan(
            &cfg(InjectionStrategy::AllLayers),
            &p(&[0, 1, 0, 1, 0, 1]),
            &DeviceCatalog::edge_pair(),
            1,
        )
        .unwrap();
        assert_eq!(plan.activation_targets, (1..=6).collect());
        let plan = build_fault_plan(
            &cfg(InjectionStrategy::FaultProneDevices),
            &p(&[0, 1, 0, 1, 0, 1]),
            &DeviceCatalog::edge_pair(),
            1,
        )
        .unwrap();
        assert_eq!(plan.activation_targets, [1, 3, 5].into());
    }

    #[test]
    fn stream_derives_from_seed_and_eval_id() {
        let mut c = cfg(InjectionStrategy::AllLayers);
        c.seed = 77;
        let plan = build_fault_plan(&c, &p(&[0; 6]), &DeviceCatalog::edge_pair(), 1234).unwrap();
        assert_eq!(plan.rng, RngStream::new(77, 1234));
    }

    #[test]
    fn platform_plan_changes_only_with_target_set() {
        let c = cfg(InjectionStrategy::PlatformSpecific { device: 0 });
        let cat = DeviceCatalog::edge_pair();
        let a = build_fault_plan(&c, &p(&[0, 1, 1, 0, 1, 1]), &cat, 5).unwrap();
        let b = build_fault_plan(&c, &p(&[0, 1, 1, 0, 1, 1]), &cat, 5).unwrap();
        let d = build_fault_plan(&c, &p(&[0, 0, 1, 0, 1, 1]), &cat, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.weight_targets, d.weight_targets);
    }

    #[test]
    fn uncapped_devices_always_feasible() {
        let (m, _) = generate_toy_model(ToyArch::TinyCnn, 7);
        for i in 0..64 {
            let part = Partition::from_index(i, 6, 2);
            assert!(check_resource_constraints(&part, &m, &DeviceCatalog::edge_pair()).feasible);
        }
    }

    #[test]
    fn weight_cap_violation_names_device() {
        let (m, _) = generate_toy_model(ToyArch::TinyCnn, 7);
        let cat = DeviceCatalog::new(vec![
            Device::new("tiny-mcu").with_caps(None, Some(m.total_weight_bytes() - 1))
        ])
        .unwrap();
        let v = check_resource_constraints(&Partition::uniform(6, 0), &m, &cat);
        assert!(!v.feasible);
        assert_eq!(v.violations[0].device_name, "tiny-mcu");
        assert_eq!(v.violations[0].resource, Resource::WeightBytes);
        assert!(v.total_violation() > 0.0);
    }

    #[test]
    fn balanced_split_fits_sixty_percent_caps() {
        use crate::model::{ConvParams, LayerKind, LayerSpec};
        use crate::quant::QuantTensor;
        let conv = |out_channels| {
            LayerKind::Conv2d(ConvParams {
                out_channels,
                kernel: 3,
                stride: 1,
                padding: 1,
                out_scale_exp: -4,
            })
        };
        let w = |shape| QuantTensor::zeros(shape, 16, -3).unwrap();
        let m = ModelGraph::new(
            "balanced",
            vec![1, 8, 8],
            -4,
            16,
            64,
            vec![
                LayerSpec::new(1, conv(4), vec![0]).with_weights(w(vec![4, 1, 3, 3]), None),
                LayerSpec::new(2, crate::model::LayerKind::Relu, vec![1]),
                LayerSpec::new(3, conv(1), vec![2]).with_weights(w(vec![1, 4, 3, 3]), None),
                LayerSpec::new(4, crate::model::LayerKind::Flatten, vec![3]),
            ],
        )
        .unwrap();
        // oracle: MACs and bytes straight from the shape arithmetic
        let shapes = crate::model::shape_inference(&m);
        let out = |i: usize| shapes[i].iter().product::<usize>() as u64;
        let macs = [out(0) * 9, out(1), out(2) * 4 * 9, out(3)];
        let bytes = [36 * 2, 0, 36 * 2, 0];
        assert_eq!(macs.iter().sum::<u64>(), m.total_macs());
        assert_eq!(bytes.iter().sum::<u64>(), m.total_weight_bytes());
        let cap_m = m.total_macs() * 6 / 10;
        let cap_b = m.total_weight_bytes() * 6 / 10;
        let cat = DeviceCatalog::new(vec![
            Device::new("a").with_caps(Some(cap_m), Some(cap_b)),
            Device::new("b").with_caps(Some(cap_m), Some(cap_b)),
        ])
        .unwrap();
        let v = check_resource_constraints(&p(&[0, 0, 1, 1]), &m, &cat);
        assert!(v.feasible, "{v:?}");
        assert_eq!(v.usage[0].macs, macs[0] + macs[1]);
        assert!(!check_resource_constraints(&p(&[0; 4]), &m, &cat).feasible);
    }
}
