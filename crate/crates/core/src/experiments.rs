//! Seed-averaged experiment pipelines: optimize, deploy, then measure the
//! deployed partition on held-out samples under fresh fault draws.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cost::ProfileTable;
use crate::error::{Error, Result};
use crate::fault::{build_fault_plan, DeviceCatalog, FaultConfig};
use crate::inference::evaluate_accuracy;
use crate::model::{LabeledDataset, ModelGraph};
use crate::nsga2::{
    optimize, select_deployment, Deployment, DeploymentCaps, EvalContext, OptimizationMode, OptimizerParams,
    ParetoFront, SelectionPolicy,
};
use crate::partition::Partition;
use crate::quant::mix64;

const EVAL_TAG: u64 = 0x6865_6c64_5f6f_7574;

/// Everything an experiment needs besides the seed.
#[derive(Debug, Clone)]
pub struct Setup {
    pub model: Arc<ModelGraph>,
    /// Samples scored during optimization.
    pub search_set: Arc<LabeledDataset>,
    /// Held-out samples for measuring deployments and for online monitoring.
    pub eval_set: Arc<LabeledDataset>,
    pub table: ProfileTable,
    pub catalog: DeviceCatalog,
    pub fault: FaultConfig,
    pub optimizer: OptimizerParams,
    pub trials: usize,
    pub policy: SelectionPolicy,
    /// Deployment caps relative to the front's cheapest latency and energy.
    pub overhead_slack: Option<f64>,
}

impl Setup {
    pub fn context(&self, mode: OptimizationMode, fault: &FaultConfig) -> Result<EvalContext> {
        EvalContext::new(
            Arc::clone(&self.model),
            Arc::clone(&self.search_set),
            self.table.clone(),
            fault.clone(),
            self.catalog.clone(),
            mode,
        )?
        .with_trials(self.trials)
    }

    /// Optimizes with `fault` (its seed included) and `seed` for the search,
    /// then selects a deployment from the front.
    pub fn deploy(&self, mode: OptimizationMode, fault: &FaultConfig, seed: u64) -> Result<(ParetoFront, Deployment)> {
        let ctx = self.context(mode, fault)?;
        let params = OptimizerParams { seed, ..self.optimizer };
        let front = optimize(&ctx, &params, None, None)?;
        if front.is_empty() {
            return Err(Error::Infeasible("optimizer returned no feasible partition".into()));
        }
        let caps = self.overhead_slack.map(|s| DeploymentCaps::relative_to(&front, s));
        let dep = select_deployment(&front, self.policy, caps)?;
        Ok((front, dep))
    }

    /// Top-1 of `partition` on the held-out set with fault draws independent of
    /// those used during optimization.
    pub fn held_out_top1(&self, partition: &Partition, fault: &FaultConfig, seed: u64) -> Result<f64> {
        let f = FaultConfig {
            seed: mix64(seed ^ EVAL_TAG),
            ..fault.clone()
        };
        let plan = build_fault_plan(&f, partition, &self.catalog, partition.genome_hash())?;
        Ok(evaluate_accuracy(&self.model, &self.eval_set, Some(&plan))?.top1)
    }
}

/// Mean with a two-sided 95% Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub ci95: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        if n < 2 {
            return Self {
                mean,
                std: 0.0,
                ci95: f64::INFINITY,
                n,
            };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("n >= 2")
            .inverse_cdf(0.975);
        Self {
            mean,
            std,
            ci95: t * std / (n as f64).sqrt(),
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultScenario {
    WeightOnly,
    InputOnly,
    InputWeight,
}

impl FaultScenario {
    pub const ALL: [FaultScenario; 3] = [Self::WeightOnly, Self::InputOnly, Self::InputWeight];

    pub fn name(&self) -> &'static str {
        match self {
            Self::WeightOnly => "weight_only",
            Self::InputOnly => "input_only",
            Self::InputWeight => "input_weight",
        }
    }

    /// `[activation, weight]` rates for a nominal `rate`.
    pub fn rates(&self, rate: f64) -> [f64; 2] {
        match self {
            Self::WeightOnly => [0.0, rate],
            Self::InputOnly => [rate, 0.0],
            Self::InputWeight => [rate, rate],
        }
    }
}

pub fn mode_name(mode: OptimizationMode) -> &'static str {
    match mode {
        OptimizationMode::FaultAware => "fault_aware",
        OptimizationMode::FaultUnaware => "fault_unaware",
    }
}

/// Per-seed outcomes of one method under one fault setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub method: OptimizationMode,
    pub seeds: Vec<u64>,
    pub top1: Vec<f64>,
    pub latency_ms: Vec<f64>,
    pub energy_mj: Vec<f64>,
    pub deployments: Vec<Partition>,
}

/// Optimizes and deploys with `fault` for each seed, then measures the
/// deployment on held-out data under the same rates.
pub fn run_method(setup: &Setup, mode: OptimizationMode, fault: &FaultConfig, seeds: &[u64]) -> Result<MethodRun> {
    let mut run = MethodRun {
        method: mode,
        seeds: seeds.to_vec(),
        top1: Vec::new(),
        latency_ms: Vec::new(),
        energy_mj: Vec::new(),
        deployments: Vec::new(),
    };
    for &seed in seeds {
        let f = FaultConfig { seed, ..fault.clone() };
        let (_, dep) = setup.deploy(mode, &f, seed)?;
        run.top1.push(setup.held_out_top1(&dep.partition, &f, seed)?);
        run.latency_ms.push(dep.objectives.latency_ms);
        run.energy_mj.push(dep.objectives.energy_mj);
        run.deployments.push(dep.partition);
    }
    Ok(run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub method: OptimizationMode,
    pub scenario: FaultScenario,
    pub top1: f64,
    pub latency_ms: f64,
    pub energy_mj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDelta {
    pub scenario: FaultScenario,
    /// Fault-aware minus fault-unaware Top-1.
    pub accuracy_gain: f64,
    pub latency_overhead_pct: f64,
    pub energy_overhead_pct: f64,
}

impl ComparisonDelta {
    pub fn between(aware: &ComparisonRow, unaware: &ComparisonRow) -> Self {
        Self {
            scenario: aware.scenario,
            accuracy_gain: aware.top1 - unaware.top1,
            latency_overhead_pct: (aware.latency_ms - unaware.latency_ms) / unaware.latency_ms * 100.0,
            energy_overhead_pct: (aware.energy_mj - unaware.energy_mj) / unaware.energy_mj * 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rate: f64,
    pub seeds: usize,
    pub rows: Vec<ComparisonRow>,
    pub deltas: Vec<ComparisonDelta>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl ComparisonReport {
    pub fn row(&self, method: OptimizationMode, scenario: FaultScenario) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method && r.scenario == scenario)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,method,scenario,top1,latency_ms,energy_mj\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{}\n",
                r.model,
                mode_name(r.method),
                r.scenario.name(),
                r.top1,
                r.latency_ms,
                r.energy_mj
            );
        }
        s
    }

    pub fn deltas_csv(&self) -> String {
        let mut s = String::from("scenario,accuracy_gain,latency_overhead_pct,energy_overhead_pct\n");
        for d in &self.deltas {
            s += &format!(
                "{},{},{},{}\n",
                d.scenario.name(),
                d.accuracy_gain,
                d.latency_overhead_pct,
                d.energy_overhead_pct
            );
        }
        s
    }

    /// Human-readable table with accuracy in percent.
    pub fn render(&self) -> String {
        let mut s = format!("Fault rate {:.0}% ({} seeds)\n", self.rate * 100.0, self.seeds);
        s += &format!(
            "{:<14} {:<14} {:>8} {:>12} {:>12}\n",
            "scenario", "method", "top1 %", "latency ms", "energy mJ"
        );
        for r in &self.rows {
            s += &format!(
                "{:<14} {:<14} {:>8.2} {:>12.4} {:>12.4}\n",
                r.scenario.name(),
                mode_name(r.method),
                r.top1 * 100.0,
                r.latency_ms,
                r.energy_mj
            );
        }
        for d in &self.deltas {
            s += &format!(
                "{:<14} gain {:+.2} pts, latency {:+.2}%, energy {:+.2}%\n",
                d.scenario.name(),
                d.accuracy_gain * 100.0,
                d.latency_overhead_pct,
                d.energy_overhead_pct
            );
        }
        s
    }
}

/// Both methods across the three fault scenarios at `rate`, averaged over `seeds`.
pub fn compare(setup: &Setup, rate: f64, seeds: &[u64]) -> Result<ComparisonReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("comparison needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    let mut deltas = Vec::new();
    for scenario in FaultScenario::ALL {
        let [act, weight] = scenario.rates(rate);
        let fault = setup.fault.with_rates(act, weight);
        let mut pair = Vec::new();
        for mode in [OptimizationMode::FaultAware, OptimizationMode::FaultUnaware] {
            let run = run_method(setup, mode, &fault, seeds)?;
            pair.push(ComparisonRow {
                model: setup.model.name().to_string(),
                method: mode,
                scenario,
                top1: mean(&run.top1),
                latency_ms: mean(&run.latency_ms),
                energy_mj: mean(&run.energy_mj),
            });
        }
        deltas.push(ComparisonDelta::between(&pair[0], &pair[1]));
        rows.extend(pair);
    }
    Ok(ComparisonReport {
        rate,
        seeds: seeds.len(),
        rows,
        deltas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: OptimizationMode,
    pub fault_rate: f64,
    pub top1: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,fault_rate,top1_mean,top1_std,top1_ci95,seeds\n");
        for r in &self.rows {
            s += &format!(
                "{},{},{},{},{},{}\n",
                mode_name(r.method),
                r.fault_rate,
                r.top1.mean,
                r.top1.std,
                r.top1.ci95,
                r.top1.n
            );
        }
        s
    }
}

/// For each seed, deploys both methods once under the configured fault
/// setting, then measures each deployment at every rate in `rates` (applied
/// to both fault domains).
pub fn sweep(setup: &Setup, rates: &[f64], seeds: &[u64]) -> Result<SweepReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one seed".into()));
    }
    if let Some(r) = rates.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(Error::InvalidArgument(format!("sweep rate {r} outside [0, 1]")));
    }
    let mut rows = Vec::new();
    for mode in [OptimizationMode::FaultAware, OptimizationMode::FaultUnaware] {
        let mut per_rate = vec![Vec::with_capacity(seeds.len()); rates.len()];
        for &seed in seeds {
            let f = FaultConfig {
                seed,
                ..setup.fault.clone()
            };
            let (_, dep) = setup.deploy(mode, &f, seed)?;
            for (acc, &r) in per_rate.iter_mut().zip(rates) {
                acc.push(setup.held_out_top1(&dep.partition, &f.with_rates(r, r), seed)?);
            }
        }
        for (acc, &r) in per_rate.iter().zip(rates) {
            rows.push(SweepRow {
                method: mode,
                fault_rate: r,
                top1: Summary::of(acc),
            });
        }
    }
    Ok(SweepReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fault::InjectionStrategy;
    use crate::model::{generate_toy_model, ToyArch};

    fn small_setup() -> Setup {
        let (m, ds) = generate_toy_model(ToyArch::TinyCnn, 7);
        let (search, eval) = ds.split(64).unwrap();
        let table = ProfileTable::from_device_factors(&m, &[1.0, 1.5], &[1.0, 1.25]).unwrap();
        Setup {
            model: Arc::new(m),
            search_set: Arc::new(search),
            eval_set: Arc::new(eval.subset(64).unwrap()),
            table,
            catalog: DeviceCatalog::edge_pair(),
            fault: FaultConfig {
                strategy: InjectionStrategy::PlatformSpecific { device: 0 },
                ..FaultConfig::default()
            },
            optimizer: OptimizerParams {
                population: 12,
                generations: 6,
                ..OptimizerParams::default()
            },
            trials: 1,
            policy: SelectionPolicy::MinAccDrop,
            overhead_slack: Some(0.2),
        }
    }

    #[test]
    fn summary_matches_hand_values() {
        let s = Summary::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.mean, 2.5);
        assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
        // t(0.975, 3) = 3.182446305284263
        assert!((s.ci95 - 3.182446305284263 * s.std / 2.0).abs() < 1e-9);
        assert!(Summary::of(&[1.0]).ci95.is_infinite());
    }

    #[test]
    fn zero_rate_comparison_ties() {
        let report = compare(&small_setup(), 0.0, &[1, 2]).unwrap();
        assert_eq!(report.rows.len(), 6);
        for s in FaultScenario::ALL {
            let a = report.row(OptimizationMode::FaultAware, s).unwrap();
            let u = report.row(OptimizationMode::FaultUnaware, s).unwrap();
            assert_eq!(a.top1, u.top1);
        }
    }

    #[test]
    fn deltas_recompute_from_cells() {
        let report = compare(&small_setup(), 0.2, &[3]).unwrap();
        for d in &report.deltas {
            let a = report.row(OptimizationMode::FaultAware, d.scenario).unwrap();
            let u = report.row(OptimizationMode::FaultUnaware, d.scenario).unwrap();
            assert_eq!(
                d.latency_overhead_pct,
                (a.latency_ms - u.latency_ms) / u.latency_ms * 100.0
            );
            assert_eq!(d.energy_overhead_pct, (a.energy_mj - u.energy_mj) / u.energy_mj * 100.0);
        }
        assert_eq!(report.to_csv().lines().count(), 7);
    }

    #[test]
    fn sweep_rate_zero_is_clean() {
        let setup = small_setup();
        let report = sweep(&setup, &[0.0, 0.1, 0.2, 0.3, 0.4], &[1, 2]).unwrap();
        assert_eq!(report.rows.len(), 10);
        let clean = evaluate_accuracy(&setup.model, &setup.eval_set, None).unwrap().top1;
        for r in report.rows.iter().filter(|r| r.fault_rate == 0.0) {
            assert_eq!(r.top1.mean, clean);
        }
        assert!(sweep(&setup, &[1.5], &[1]).is_err());
    }
}
