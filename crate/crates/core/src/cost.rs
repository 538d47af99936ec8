//! Per-layer, per-device latency and energy tables and the partition cost
//! estimates built on them.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fault::DeviceCatalog;
use crate::model::ModelGraph;
use crate::partition::Partition;
use crate::quant::RngStream;

const PROFILE_HEADER: &str = "layer,device,latency_ms,energy_mj";
const TRANSITION_HEADER: &str = "from_device,to_device,latency_ms,energy_mj";
const SYNTHETIC_STREAM: u64 = 0x7072_6f66_696c_6573;
/// Synthetic latency of one MAC on a factor-1 device.
pub const SYNTHETIC_MS_PER_MAC: f64 = 1.0 / 1024.0;
/// Synthetic energy of one MAC on a factor-1 device.
pub const SYNTHETIC_MJ_PER_MAC: f64 = 1.0 / 4096.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub latency_ms: f64,
    pub energy_mj: f64,
}

/// Cost of moving a boundary tensor from one device to the next.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionCost {
    pub from_device: usize,
    pub to_device: usize,
    pub latency_ms: f64,
    pub energy_mj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    num_layers: usize,
    num_devices: usize,
    /// Row-major `[layer - 1][device]`.
    entries: Vec<LayerCost>,
    pub source: String,
    pub transitions: Vec<TransitionCost>,
    /// Transition costs are only charged when this is set.
    pub include_transitions: bool,
}

fn check_positive(what: &str, layer: usize, device: usize, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::Profile(format!(
            "{what} for ({layer},{device}) must be positive, got {v}"
        )))
    }
}

impl ProfileTable {
    /// `rows[l][d]` holds the cost of layer `l + 1` on device `d`.
    pub fn new(rows: Vec<Vec<LayerCost>>, source: impl Into<String>) -> Result<Self> {
        let num_layers = rows.len();
        let num_devices = rows.first().map_or(0, Vec::len);
        if num_layers == 0 || num_devices == 0 {
            return Err(Error::Profile("profile table is empty".into()));
        }
        let mut entries = Vec::with_capacity(num_layers * num_devices);
        for (l, row) in rows.into_iter().enumerate() {
            if row.len() != num_devices {
                return Err(Error::Profile(format!(
                    "layer {} has {} device entries, expected {num_devices}",
                    l + 1,
                    row.len()
                )));
            }
            for (d, c) in row.iter().enumerate() {
                check_positive("latency", l + 1, d, c.latency_ms)?;
                check_positive("energy", l + 1, d, c.energy_mj)?;
            }
            entries.extend(row);
        }
        Ok(Self {
            num_layers,
            num_devices,
            entries,
            source: source.into(),
            transitions: Vec::new(),
            include_transitions: false,
        })
    }

    /// Costs proportional to layer MACs, scaled per device by the given factors.
    pub fn from_device_factors(model: &ModelGraph, latency_factors: &[f64], energy_factors: &[f64]) -> Result<Self> {
        if latency_factors.len() != energy_factors.len() {
            return Err(Error::InvalidArgument(
                "latency and energy factor lists differ in length".into(),
            ));
        }
        let rows = (1..=model.num_layers())
            .map(|l| {
                let macs = model.layer_macs(l) as f64;
                latency_factors
                    .iter()
                    .zip(energy_factors)
                    .map(|(fl, fe)| LayerCost {
                        latency_ms: macs * SYNTHETIC_MS_PER_MAC * fl,
                        energy_mj: macs * SYNTHETIC_MJ_PER_MAC * fe,
                    })
                    .collect()
            })
            .collect();
        Self::new(rows, "analytical")
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_devices(&self) -> usize {
        self.num_devices
    }

    /// Cost of 1-based `layer` on `device`.
    pub fn cost(&self, layer: usize, device: usize) -> LayerCost {
        self.entries[(layer - 1) * self.num_devices + device]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn transition(&self, from: usize, to: usize) -> Option<&TransitionCost> {
        self.transitions
            .iter()
            .find(|t| t.from_device == from && t.to_device == to)
    }

    /// Checks that the table covers exactly the model's layers and the catalog's devices.
    pub fn check_against(&self, model: &ModelGraph, catalog: &DeviceCatalog) -> Result<()> {
        if self.num_layers != model.num_layers() || self.num_devices != catalog.len() {
            return Err(Error::Profile(format!(
                "profile covers {} layers x {} devices, model/catalog need {} x {}",
                self.num_layers,
                self.num_devices,
                model.num_layers(),
                catalog.len()
            )));
        }
        Ok(())
    }

    /// Copy with every entry on `device` multiplied by `factors[device]`.
    pub fn perturbed(&self, latency_factors: &[f64], energy_factors: &[f64]) -> Result<Self> {
        if latency_factors.len() != self.num_devices || energy_factors.len() != self.num_devices {
            return Err(Error::InvalidArgument(format!(
                "perturbation needs {} factors per column",
                self.num_devices
            )));
        }
        let mut out = self.clone();
        for (i, e) in out.entries.iter_mut().enumerate() {
            let d = i % self.num_devices;
            e.latency_ms *= latency_factors[d];
            e.energy_mj *= energy_factors[d];
            check_positive("latency", i / self.num_devices + 1, d, e.latency_ms)?;
            check_positive("energy", i / self.num_devices + 1, d, e.energy_mj)?;
        }
        Ok(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# source: {}\n{PROFILE_HEADER}\n", self.source);
        for l in 1..=self.num_layers {
            for d in 0..self.num_devices {
                let c = self.cost(l, d);
                let _ = writeln!(s, "{l},{d},{},{}", c.latency_ms, c.energy_mj);
            }
        }
        if !self.transitions.is_empty() {
            let _ = writeln!(
                s,
                "\n# transitions: {}",
                if self.include_transitions {
                    "enabled"
                } else {
                    "disabled"
                }
            );
            let _ = writeln!(s, "{TRANSITION_HEADER}");
            for t in &self.transitions {
                let _ = writeln!(s, "{},{},{},{}", t.from_device, t.to_device, t.latency_ms, t.energy_mj);
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses a profile file. Layer indices are 1-based, device ids 0-based.
    pub fn parse(text: &str, num_layers: usize, num_devices: usize) -> Result<Self> {
        let mut source = String::from("measured");
        let mut include_transitions = false;
        let mut cells: Vec<Option<LayerCost>> = vec![None; num_layers * num_devices];
        let mut transitions = Vec::new();
        let mut section = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = n + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                let comment = comment.trim();
                if let Some(s) = comment.strip_prefix("source:") {
                    source = s.trim().to_string();
                } else if let Some(s) = comment.strip_prefix("transitions:") {
                    include_transitions = match s.trim() {
                        "enabled" => true,
                        "disabled" => false,
                        other => return Err(Error::Profile(format!("line {lineno}: bad transitions flag `{other}`"))),
                    };
                }
                continue;
            }
            if line == PROFILE_HEADER {
                section = Some(true);
                continue;
            }
            if line == TRANSITION_HEADER {
                section = Some(false);
                continue;
            }
            let Some(is_layer_row) = section else {
                return Err(Error::Profile(format!(
                    "line {lineno}: expected header `{PROFILE_HEADER}`"
                )));
            };
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::Profile(format!(
                    "line {lineno}: expected 4 fields, found {}",
                    fields.len()
                )));
            }
            let int = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Profile(format!("line {lineno}: bad integer `{s}`")))
            };
            let real = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Profile(format!("line {lineno}: bad number `{s}`")))
            };
            let (a, b, lat, en) = (int(fields[0])?, int(fields[1])?, real(fields[2])?, real(fields[3])?);
            if is_layer_row {
                if a == 0 || a > num_layers || b >= num_devices {
                    return Err(Error::Profile(format!(
                        "line {lineno}: pair ({a},{b}) outside {num_layers} layers x {num_devices} devices"
                    )));
                }
                check_positive("latency", a, b, lat)?;
                check_positive("energy", a, b, en)?;
                let cell = &mut cells[(a - 1) * num_devices + b];
                if cell.is_some() {
                    return Err(Error::Profile(format!("line {lineno}: duplicate profile ({a},{b})")));
                }
                *cell = Some(LayerCost {
                    latency_ms: lat,
                    energy_mj: en,
                });
            } else {
                if a >= num_devices || b >= num_devices {
                    return Err(Error::Profile(format!(
                        "line {lineno}: transition ({a},{b}) names an unknown device"
                    )));
                }
                if !(lat >= 0.0 && en >= 0.0) {
                    return Err(Error::Profile(format!("line {lineno}: negative transition cost")));
                }
                transitions.push(TransitionCost {
                    from_device: a,
                    to_device: b,
                    latency_ms: lat,
                    energy_mj: en,
                });
            }
        }
        let mut entries = Vec::with_capacity(cells.len());
        for (i, c) in cells.into_iter().enumerate() {
            let c = c.ok_or_else(|| {
                Error::Profile(format!("missing profile ({},{})", i / num_devices + 1, i % num_devices))
            })?;
            entries.push(c);
        }
        Ok(Self {
            num_layers,
            num_devices,
            entries,
            source,
            transitions,
            include_transitions,
        })
    }
}

pub fn load_profiles(path: &Path, model: &ModelGraph, catalog: &DeviceCatalog) -> Result<ProfileTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ProfileTable::parse(&text, model.num_layers(), catalog.len())
}

fn transition_sum(partition: &Partition, table: &ProfileTable, pick: impl Fn(&TransitionCost) -> f64) -> f64 {
    if !table.include_transitions {
        return 0.0;
    }
    partition
        .assignment()
        .windows(2)
        .filter(|w| w[0] != w[1])
        .filter_map(|w| table.transition(w[0], w[1]))
        .map(pick)
        .sum()
}

/// Sequential execution time: the sum of each layer's latency on its device.
pub fn estimate_latency(partition: &Partition, table: &ProfileTable) -> f64 {
    let mut total = 0.0;
    for (l, &d) in partition.assignment().iter().enumerate() {
        total += table.cost(l + 1, d).latency_ms;
    }
    total + transition_sum(partition, table, |t| t.latency_ms)
}

pub fn estimate_energy(partition: &Partition, table: &ProfileTable) -> f64 {
    let mut total = 0.0;
    for (l, &d) in partition.assignment().iter().enumerate() {
        total += table.cost(l + 1, d).energy_mj;
    }
    total + transition_sum(partition, table, |t| t.energy_mj)
}

/// MAC-proportional costs with per-device latency and energy factors drawn
/// uniformly from `[1, skew]`.
pub fn generate_synthetic_profiles(
    model: &ModelGraph,
    catalog: &DeviceCatalog,
    seed: u64,
    skew: f64,
) -> Result<ProfileTable> {
    if !(skew >= 1.0 && skew.is_finite()) {
        return Err(Error::InvalidArgument(format!("skew must be >= 1, got {skew}")));
    }
    let mut rng = RngStream::new(seed, SYNTHETIC_STREAM).rng();
    let mut draw = || {
        if skew == 1.0 {
            1.0
        } else {
            rng.random_range(1.0..=skew)
        }
    };
    let (lat, en): (Vec<f64>, Vec<f64>) = (0..catalog.len()).map(|_| (draw(), draw())).unzip();
    let mut table = ProfileTable::from_device_factors(model, &lat, &en)?;
    table.source = format!("synthetic(seed={seed}, skew={skew})");
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::Device;
    use crate::model::{generate_toy_model, ToyArch};
    use proptest::prelude::*;

    fn uniform(l: usize, d: usize, lat: f64, en: f64) -> ProfileTable {
        ProfileTable::new(
            vec![
                vec![
                    LayerCost {
                        latency_ms: lat,
                        energy_mj: en
                    };
                    d
                ];
                l
            ],
            "test",
        )
        .unwrap()
    }

    #[test]
    fn uniform_sums() {
        let t = uniform(6, 2, 1.0, 0.5);
        let p = Partition::uniform(6, 0);
        assert_eq!(estimate_latency(&p, &t), 6.0);
        assert_eq!(estimate_energy(&p, &t), 3.0);
    }

    #[test]
    fn two_term_sum() {
        let c = |latency_ms| LayerCost {
            latency_ms,
            energy_mj: 1.0,
        };
        let t = ProfileTable::new(vec![vec![c(2.0), c(9.0)], vec![c(7.0), c(3.0)]], "test").unwrap();
        assert_eq!(estimate_latency(&Partition::new(vec![0, 1], 2).unwrap(), &t), 5.0);
    }

    #[test]
    fn single_layer_energy() {
        let t = uniform(1, 3, 1.0, 0.75);
        assert_eq!(estimate_energy(&Partition::uniform(1, 2), &t), 0.75);
    }

    fn full_csv(skip: Option<(usize, usize)>) -> String {
        let mut s = format!("{PROFILE_HEADER}\n");
        for l in 1..=6 {
            for d in 0..2 {
                if Some((l, d)) != skip {
                    s += &format!("{l},{d},{},{}\n", l as f64 * 0.5 + d as f64, 0.25);
                }
            }
        }
        s
    }

    #[test]
    fn parse_complete_table() {
        let t = ProfileTable::parse(&full_csv(None), 6, 2).unwrap();
        assert_eq!(t.len(), 12);
        assert_eq!(t.cost(3, 1).latency_ms, 2.5);
    }

    #[test]
    fn parse_reports_missing_pair() {
        let err = ProfileTable::parse(&full_csv(Some((4, 1))), 6, 2).unwrap_err();
        assert!(err.to_string().contains("missing profile (4,1)"), "{err}");
    }

    #[test]
    fn parse_rejects_bad_values_and_headers() {
        let neg = full_csv(None).replace("1,0,0.5,0.25", "1,0,-0.5,0.25");
        assert!(ProfileTable::parse(&neg, 6, 2).is_err());
        let zero = full_csv(None).replace("1,0,0.5,0.25", "1,0,0.5,0");
        assert!(ProfileTable::parse(&zero, 6, 2).is_err());
        let no_header = full_csv(None).replacen(PROFILE_HEADER, "", 1);
        assert!(ProfileTable::parse(&no_header, 6, 2).is_err());
        let dup = full_csv(None) + "1,0,0.5,0.25\n";
        assert!(ProfileTable::parse(&dup, 6, 2).is_err());
        assert!(ProfileTable::parse(&(full_csv(None) + "7,0,1,1\n"), 6, 2).is_err());
    }

    #[test]
    fn csv_round_trip_with_transitions() {
        let (m, _) = generate_toy_model(ToyArch::TinyCnn, 7);
        let mut t = generate_synthetic_profiles(&m, &DeviceCatalog::edge_pair(), 3, 2.0).unwrap();
        t.transitions.push(TransitionCost {
            from_device: 0,
            to_device: 1,
            latency_ms: 0.5,
            energy_mj: 0.25,
        });
        let back = ProfileTable::parse(&t.to_csv(), 6, 2).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn transitions_only_charged_when_enabled() {
        let mut t = uniform(4, 2, 1.0, 1.0);
        t.transitions.push(TransitionCost {
            from_device: 0,
            to_device: 1,
            latency_ms: 0.5,
            energy_mj: 0.25,
        });
        let p = Partition::new(vec![0, 1, 1, 0], 2).unwrap();
        assert_eq!(estimate_latency(&p, &t), 4.0);
        t.include_transitions = true;
        assert_eq!(estimate_latency(&p, &t), 4.5);
        assert_eq!(estimate_energy(&p, &t), 4.25);
    }

    #[test]
    fn synthetic_degenerate_skew_and_determinism() {
        let (m, _) = generate_toy_model(ToyArch::TinyCnn, 7);
        let cat = DeviceCatalog::edge_pair();
        let t = generate_synthetic_profiles(&m, &cat, 11, 1.0).unwrap();
        for l in 1..=6 {
            assert_eq!(t.cost(l, 0), t.cost(l, 1));
        }
        let a = generate_synthetic_profiles(&m, &cat, 11, 3.0).unwrap();
        let b = generate_synthetic_profiles(&m, &cat, 11, 3.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_profiles(&m, &cat, 12, 3.0).unwrap());
        assert!(generate_synthetic_profiles(&m, &cat, 11, 0.5).is_err());
    }

    #[test]
    fn synthetic_entries_track_mac_counts() {
        let (m, _) = generate_toy_model(ToyArch::TinyResnet, 7);
        let cat = DeviceCatalog::new(vec![Device::new("a"), Device::new("b"), Device::new("c")]).unwrap();
        let t = generate_synthetic_profiles(&m, &cat, 5, 4.0).unwrap();
        let shapes = crate::model::shape_inference(&m);
        // oracle: conv = out * in_channels * k^2, max pool = out * k^2, global
        // average = input elements, the rest one per output element
        use crate::model::LayerKind;
        let macs: Vec<f64> = (1..=m.num_layers())
            .map(|l| {
                let out: usize = shapes[l - 1].iter().product();
                let src = match m.layer(l).inputs[0] {
                    0 => m.input_shape(),
                    i => &shapes[i - 1],
                };
                let n = match &m.layer(l).kind {
                    LayerKind::Conv2d(p) => out * src[0] * p.kernel * p.kernel,
                    LayerKind::MaxPool(p) => out * p.kernel * p.kernel,
                    LayerKind::AvgPoolGlobal => src.iter().product(),
                    _ => out,
                };
                n as f64
            })
            .collect();
        for d in 0..3 {
            let k_lat = t.cost(1, d).latency_ms / macs[0];
            let k_en = t.cost(1, d).energy_mj / macs[0];
            assert!((SYNTHETIC_MS_PER_MAC..=4.0 * SYNTHETIC_MS_PER_MAC).contains(&k_lat));
            for (l, &mac) in macs.iter().enumerate() {
                let c = t.cost(l + 1, d);
                assert!((c.latency_ms / mac - k_lat).abs() <= 1e-12 * k_lat);
                assert!((c.energy_mj / mac - k_en).abs() <= 1e-12 * k_en);
            }
        }
    }

    #[test]
    fn perturbation_scales_one_device() {
        let t = uniform(3, 2, 1.0, 1.0);
        let p = t.perturbed(&[1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(p.cost(2, 1).latency_ms, 2.0);
        assert_eq!(p.cost(2, 0).latency_ms, 1.0);
        assert!(t.perturbed(&[1.0], &[1.0]).is_err());
    }

    fn dyadic_table(l: usize, d: usize) -> impl Strategy<Value = ProfileTable> {
        proptest::collection::vec((1u32..4096, 1u32..4096), l * d).prop_map(move |v| {
            let rows = v
                .chunks(d)
                .map(|r| {
                    r.iter()
                        .map(|&(a, b)| LayerCost {
                            latency_ms: a as f64 / 64.0,
                            energy_mj: b as f64 / 256.0,
                        })
                        .collect()
                })
                .collect();
            ProfileTable::new(rows, "prop").unwrap()
        })
    }

    proptest! {
        #[test]
        fn moving_one_layer_changes_totals_by_its_delta(
            t in dyadic_table(6, 3),
            genes in proptest::collection::vec(0usize..3, 6),
            layer in 1usize..=6,
            to in 0usize..3,
        ) {
            let p = Partition::new(genes.clone(), 3).unwrap();
            let mut moved = genes;
            let from = moved[layer - 1];
            moved[layer - 1] = to;
            let q = Partition::new(moved, 3).unwrap();
            let dl = t.cost(layer, to).latency_ms - t.cost(layer, from).latency_ms;
            let de = t.cost(layer, to).energy_mj - t.cost(layer, from).energy_mj;
            prop_assert_eq!(estimate_latency(&q, &t), estimate_latency(&p, &t) + dl);
            prop_assert_eq!(estimate_energy(&q, &t), estimate_energy(&p, &t) + de);
        }

        #[test]
        fn totals_ignore_summation_order(
            t in dyadic_table(6, 2),
            idx in 0u128..64,
        ) {
            let p = Partition::from_index(idx, 6, 2);
            let rev: f64 = (1..=6).rev().map(|l| t.cost(l, p.device_of(l)).latency_ms).sum();
            prop_assert_eq!(estimate_latency(&p, &t), rev);
        }
    }
}
