//! Deployment-time simulation: monitor the accuracy drop of the active
//! partition window by window and re-optimize when it exceeds a threshold.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost::{estimate_energy, estimate_latency, ProfileTable};
use crate::error::{Error, Result};
use crate::fault::{build_fault_plan, check_resource_constraints, FaultConfig};
use crate::inference::predict_all;
use crate::model::LabeledDataset;
use crate::nsga2::{optimize, select_deployment, DeploymentCaps, EvalContext, OptimizerParams, SelectionPolicy};
use crate::partition::Partition;
use crate::quant::mix64;

pub const DEFAULT_THETA: f64 = 0.01;
pub const NO_FEASIBLE_REPARTITION: &str = "no_feasible_repartition";
const WINDOW_TAG: u64 = 0x7769_6e64_6f77_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Epoch {
    /// Length in inference batches.
    pub batches: usize,
    pub fault_rate_act: f64,
    pub fault_rate_weight: f64,
    /// Per-device multipliers applied to the offline latency column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_factors: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_factors: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuntimeScenario {
    pub epochs: Vec<Epoch>,
    /// Batches per accuracy estimate.
    pub monitor_window: usize,
    /// Samples per batch.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    8
}
fn default_theta() -> f64 {
    DEFAULT_THETA
}

impl RuntimeScenario {
    pub fn validate(&self) -> Result<()> {
        if self.epochs.is_empty() {
            return Err(Error::InvalidArgument("scenario needs at least one epoch".into()));
        }
        if self.monitor_window == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "monitor_window and batch_size must be at least 1".into(),
            ));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) && self.theta != 1.0 {
            return Err(Error::InvalidArgument(format!("theta {} outside (0, 1]", self.theta)));
        }
        for (i, e) in self.epochs.iter().enumerate() {
            if e.batches == 0 {
                return Err(Error::InvalidArgument(format!("epoch {i} has no batches")));
            }
            for r in [e.fault_rate_act, e.fault_rate_weight] {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::InvalidArgument(format!(
                        "epoch {i}: fault rate {r} outside [0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn windows_in(&self, epoch: &Epoch) -> usize {
        epoch.batches.div_ceil(self.monitor_window)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let s: Self = toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeEvent {
    pub epoch: usize,
    /// Window index within the epoch.
    pub window: usize,
    pub acc_drop: f64,
    pub latency_ms: f64,
    pub energy_mj: f64,
    /// Partition active during the window.
    pub partition: Partition,
    pub digest: String,
    pub repartition_triggered: bool,
    /// Partitions scored by the re-optimization this window triggered.
    pub reopt_evaluations: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSummary {
    pub windows: usize,
    pub triggers: usize,
    pub triggers_per_epoch: Vec<usize>,
    pub final_partition: Partition,
    pub theta: f64,
    pub clean_accuracy_source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeTrace {
    pub events: Vec<RuntimeEvent>,
    pub summary: RuntimeSummary,
}

impl RuntimeTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "epoch,window,acc_drop,latency_ms,energy_mj,partition,digest,repartition_triggered,reopt_evaluations,note\n",
        );
        for e in &self.events {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.window,
                e.acc_drop,
                e.latency_ms,
                e.energy_mj,
                e.partition,
                e.digest,
                e.repartition_triggered,
                e.reopt_evaluations,
                e.note.as_deref().unwrap_or("")
            );
        }
        s
    }

    pub fn events_in(&self, epoch: usize) -> impl Iterator<Item = &RuntimeEvent> {
        self.events.iter().filter(move |e| e.epoch == epoch)
    }
}

/// Outcome of one re-optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct Reoptimization {
    /// `None` when the new front has no feasible member.
    pub partition: Option<Partition>,
    pub evaluations: u64,
}

/// Re-runs the optimizer with the current fault rates and cost table, then
/// picks the member with the smallest accuracy drop. `caps_slack` bounds the
/// latency and energy overhead relative to the new front's cheapest members.
pub fn run_nsga2_with_current_stats(
    ctx: &EvalContext,
    current_faults: &FaultConfig,
    current_table: &ProfileTable,
    params: &OptimizerParams,
    caps_slack: Option<f64>,
) -> Result<Reoptimization> {
    let updated = ctx.retargeted(current_faults.clone(), current_table.clone())?;
    let front = optimize(&updated, params, None, None)?;
    let evaluations = updated.evaluation_count();
    if front.is_empty() {
        return Ok(Reoptimization {
            partition: None,
            evaluations,
        });
    }
    let caps = caps_slack.map(|s| DeploymentCaps::relative_to(&front, s));
    let chosen = select_deployment(&front, SelectionPolicy::MinAccDrop, caps)?;
    Ok(Reoptimization {
        partition: Some(chosen.partition),
        evaluations,
    })
}

/// Settings for the online loop beyond the scenario itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnlineParams {
    pub optimizer: OptimizerParams,
    pub caps_slack: Option<f64>,
}

/// Plays `scenario` against `initial`. Each window draws its samples
/// cyclically from `monitor`, compares faulty Top-1 with the clean Top-1 of
/// the same samples, and re-optimizes when the drop exceeds `theta`.
pub fn simulate_online(
    initial: &Partition,
    scenario: &RuntimeScenario,
    ctx: &EvalContext,
    monitor: &LabeledDataset,
    params: &OnlineParams,
) -> Result<RuntimeTrace> {
    scenario.validate()?;
    if !check_resource_constraints(initial, ctx.model(), ctx.catalog()).feasible {
        return Err(Error::Infeasible(format!(
            "initial partition {initial} violates device caps"
        )));
    }
    let clean = predict_all(ctx.model(), monitor, None)?;
    let window_len = scenario.monitor_window * scenario.batch_size;
    let d = ctx.num_devices();
    let mut active = initial.clone();
    let mut events = Vec::new();
    let mut triggers_per_epoch = vec![0; scenario.epochs.len()];
    let mut cursor = 0usize;
    let mut global_window = 0u64;
    for (ei, epoch) in scenario.epochs.iter().enumerate() {
        let table = ctx.table().perturbed(
            epoch.latency_factors.as_deref().unwrap_or(&vec![1.0; d]),
            epoch.energy_factors.as_deref().unwrap_or(&vec![1.0; d]),
        )?;
        let faults = FaultConfig {
            fault_rates: [epoch.fault_rate_act, epoch.fault_rate_weight],
            seed: scenario.seed,
            ..ctx.fault().clone()
        };
        for wi in 0..scenario.windows_in(epoch) {
            let idx: Vec<usize> = (0..window_len).map(|k| (cursor + k) % monitor.len()).collect();
            cursor = (cursor + window_len) % monitor.len();
            let window = LabeledDataset::new(
                monitor.name.clone(),
                idx.iter().map(|&i| monitor.samples[i].clone()).collect(),
            )?;
            let clean_correct = idx.iter().filter(|&&i| clean[i].0).count();
            let eval_id = mix64(active.genome_hash() ^ mix64(WINDOW_TAG ^ global_window));
            let plan = build_fault_plan(&faults, &active, ctx.catalog(), eval_id)?;
            let faulty_correct = if plan.is_inert() {
                clean_correct
            } else {
                predict_all(ctx.model(), &window, Some(&plan))?
                    .iter()
                    .filter(|(ok, _)| *ok)
                    .count()
            };
            let acc_drop = (clean_correct as f64 - faulty_correct as f64) / window_len as f64;
            let mut event = RuntimeEvent {
                epoch: ei,
                window: wi,
                acc_drop,
                latency_ms: estimate_latency(&active, &table),
                energy_mj: estimate_energy(&active, &table),
                partition: active.clone(),
                digest: active.digest(),
                repartition_triggered: acc_drop > scenario.theta,
                reopt_evaluations: 0,
                note: None,
            };
            if event.repartition_triggered {
                triggers_per_epoch[ei] += 1;
                let opt = OptimizerParams {
                    seed: mix64(params.optimizer.seed ^ global_window),
                    ..params.optimizer
                };
                let re = run_nsga2_with_current_stats(ctx, &faults, &table, &opt, params.caps_slack)?;
                event.reopt_evaluations = re.evaluations;
                match re.partition {
                    Some(p) => active = p,
                    None => event.note = Some(NO_FEASIBLE_REPARTITION.into()),
                }
                log::info!(
                    "epoch {ei} window {wi}: drop {acc_drop:.4} > {}, now running {active}",
                    scenario.theta
                );
            }
            events.push(event);
            global_window += 1;
        }
    }
    Ok(RuntimeTrace {
        summary: RuntimeSummary {
            windows: events.len(),
            triggers: triggers_per_epoch.iter().sum(),
            triggers_per_epoch,
            final_partition: active,
            theta: scenario.theta,
            clean_accuracy_source: "offline clean evaluation of the monitoring samples".into(),
        },
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::{DeviceCatalog, InjectionStrategy};
    use crate::model::{generate_toy_model, ToyArch};
    use crate::nsga2::{evaluate_individual, OptimizationMode};
    use std::sync::Arc;

    fn setup(rate: f64) -> (EvalContext, LabeledDataset) {
        let (m, ds) = generate_toy_model(ToyArch::TinyCnn, 7);
        let (opt, monitor) = ds.split(64).unwrap();
        let table = ProfileTable::from_device_factors(&m, &[1.0, 1.5], &[1.0, 1.25]).unwrap();
        let fault = FaultConfig {
            fault_rates: [rate, rate],
            strategy: InjectionStrategy::PlatformSpecific { device: 0 },
            seed: 1,
            ..FaultConfig::default()
        };
        let ctx = EvalContext::new(
            Arc::new(m),
            Arc::new(opt),
            table,
            fault,
            DeviceCatalog::edge_pair(),
            OptimizationMode::FaultAware,
        )
        .unwrap();
        (ctx, monitor)
    }

    fn params() -> OnlineParams {
        OnlineParams {
            optimizer: OptimizerParams {
                population: 16,
                generations: 8,
                seed: 5,
                ..OptimizerParams::default()
            },
            caps_slack: None,
        }
    }

    fn epoch(batches: usize, rate: f64) -> Epoch {
        Epoch {
            batches,
            fault_rate_act: rate,
            fault_rate_weight: rate,
            latency_factors: None,
            energy_factors: None,
        }
    }

    fn scenario(epochs: Vec<Epoch>, theta: f64) -> RuntimeScenario {
        RuntimeScenario {
            epochs,
            monitor_window: 4,
            batch_size: 8,
            theta,
            seed: 2,
        }
    }

    #[test]
    fn fault_free_scenario_never_triggers() {
        let (ctx, mon) = setup(0.0);
        let p = Partition::uniform(6, 0);
        let t = simulate_online(
            &p,
            &scenario(vec![epoch(8, 0.0), epoch(8, 0.0)], 0.01),
            &ctx,
            &mon,
            &params(),
        )
        .unwrap();
        assert_eq!(t.summary.triggers, 0);
        assert_eq!(t.events.len(), 4);
        assert!(t.events.iter().all(|e| e.partition == p && e.acc_drop == 0.0));
    }

    #[test]
    fn trigger_iff_drop_exceeds_theta() {
        let (ctx, mon) = setup(0.3);
        let t = simulate_online(
            &Partition::uniform(6, 0),
            &scenario(vec![epoch(16, 0.3)], 0.05),
            &ctx,
            &mon,
            &params(),
        )
        .unwrap();
        assert!(t.summary.triggers >= 1);
        for e in &t.events {
            assert_eq!(e.repartition_triggered, e.acc_drop > 0.05);
            assert_eq!(e.reopt_evaluations > 0, e.repartition_triggered);
        }
    }

    #[test]
    fn identical_runs_identical_traces() {
        let (ctx, mon) = setup(0.2);
        let s = scenario(vec![epoch(8, 0.1), epoch(8, 0.3)], 0.01);
        let a = simulate_online(&Partition::uniform(6, 0), &s, &ctx, &mon, &params()).unwrap();
        let b = simulate_online(&Partition::uniform(6, 0), &s, &ctx, &mon, &params()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn never_triggering_trace_matches_offline_costs() {
        let (ctx, mon) = setup(0.2);
        let p = Partition::new(vec![0, 1, 0, 0, 1, 1], 2).unwrap();
        let t = simulate_online(&p, &scenario(vec![epoch(12, 0.2)], 1.0), &ctx, &mon, &params()).unwrap();
        let offline = evaluate_individual(&p, &ctx).unwrap();
        for e in &t.events {
            assert!(!e.repartition_triggered);
            assert_eq!(e.latency_ms, offline.objectives.latency_ms);
            assert_eq!(e.energy_mj, offline.objectives.energy_mj);
        }
    }

    #[test]
    fn reoptimization_uses_the_current_table() {
        let (ctx, _) = setup(0.0);
        let slow = ctx.table().perturbed(&[3.0, 1.0], &[1.0, 1.0]).unwrap();
        let faults = ctx.fault().with_rates(0.0, 0.0);
        let re = run_nsga2_with_current_stats(&ctx, &faults, &slow, &params().optimizer, None).unwrap();
        let p = re.partition.unwrap();
        // zero rates tie every drop at 0, so the tie-break picks the fastest
        // partition under the perturbed table
        let best = (0..64u128)
            .map(|i| Partition::from_index(i, 6, 2))
            .min_by(|a, b| estimate_latency(a, &slow).total_cmp(&estimate_latency(b, &slow)))
            .unwrap();
        assert_eq!(estimate_latency(&p, &slow), estimate_latency(&best, &slow));
        assert_eq!(p, Partition::uniform(6, 1));
        assert!(estimate_latency(&Partition::uniform(6, 0), ctx.table()) < estimate_latency(&p, ctx.table()));
        assert!(re.evaluations > 0);
    }

    #[test]
    fn rejects_bad_scenarios() {
        let (ctx, mon) = setup(0.0);
        let p = Partition::uniform(6, 0);
        for s in [
            scenario(vec![], 0.01),
            scenario(vec![epoch(4, 0.0)], 0.0),
            scenario(vec![epoch(0, 0.0)], 0.01),
        ] {
            assert!(simulate_online(&p, &s, &ctx, &mon, &params()).is_err());
        }
    }

    #[test]
    fn scenario_toml_round_trip() {
        let s = scenario(vec![epoch(8, 0.0), epoch(16, 0.3)], 0.01);
        let text = toml::to_string(&s).unwrap();
        let back: RuntimeScenario = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
    }
}
