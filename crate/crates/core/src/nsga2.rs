//! NSGA-II search over layer-to-device partitions, exhaustive enumeration for
//! small search spaces, and deployment selection from a front.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{estimate_energy, estimate_latency, ProfileTable};
use crate::error::{Error, Result};
use crate::fault::{build_fault_plan, check_resource_constraints, DeviceCatalog, FaultConfig};
use crate::inference::evaluate_accuracy;
use crate::model::{LabeledDataset, ModelGraph};
use crate::partition::Partition;
use crate::quant::RngStream;

/// Largest search space [`enumerate`] accepts by default.
pub const DEFAULT_ENUMERATION_GUARD: u128 = 4096;
const OPTIMIZER_STREAM: u64 = 0x6e73_6761_325f_6761;
const TRIAL_TAG: u64 = 0x7472_6961_6c00_0000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizationMode {
    /// Latency, energy and accuracy drop.
    #[default]
    FaultAware,
    /// Latency and energy only; faults are never injected.
    FaultUnaware,
}

impl std::str::FromStr for OptimizationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fault_aware" => Ok(Self::FaultAware),
            "fault_unaware" => Ok(Self::FaultUnaware),
            other => Err(format!("unknown mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub latency_ms: f64,
    pub energy_mj: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acc_drop: Option<f64>,
}

impl ObjectiveVector {
    pub fn values(&self) -> Vec<f64> {
        let mut v = vec![self.latency_ms, self.energy_mj];
        v.extend(self.acc_drop);
        v
    }

    /// Pareto dominance under minimization.
    pub fn dominates(&self, other: &Self) -> bool {
        dominates(&self.values(), &other.values())
    }
}

fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub partition: Partition,
    pub objectives: ObjectiveVector,
    pub rank: usize,
    /// Infinite for boundary points; written as `null` in JSON.
    #[serde(with = "infinite_as_null")]
    pub crowding: f64,
    pub feasible: bool,
    /// Total relative excess over device caps; zero when feasible.
    pub violation: f64,
    pub eval_id: u64,
}

impl Individual {
    /// Feasible beats infeasible, infeasible compare by violation, feasible by
    /// Pareto dominance.
    pub fn constrained_dominates(&self, other: &Self) -> bool {
        match (self.feasible, other.feasible) {
            (true, false) => true,
            (false, true) => false,
            (false, false) => self.violation < other.violation,
            (true, true) => self.objectives.dominates(&other.objectives),
        }
    }
}

mod infinite_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontMetadata {
    pub generations: usize,
    pub population: usize,
    pub seed: u64,
    pub config_digest: String,
    pub mode: OptimizationMode,
    /// Distinct partitions evaluated by the context so far.
    pub evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFront {
    pub members: Vec<Individual>,
    pub metadata: FrontMetadata,
}

impl ParetoFront {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn assignments(&self) -> Vec<Partition> {
        self.members.iter().map(|m| m.partition.clone()).collect()
    }

    /// One row per member. The `acc_drop` column is omitted for fault-unaware fronts.
    pub fn to_csv(&self) -> String {
        let with_drop = self.metadata.mode == OptimizationMode::FaultAware;
        let mut s = String::from(if with_drop {
            "assignment,latency_ms,energy_mj,acc_drop,rank,feasible\n"
        } else {
            "assignment,latency_ms,energy_mj,rank,feasible\n"
        });
        for m in &self.members {
            let o = &m.objectives;
            let _ = write!(s, "{},{},{}", m.partition, o.latency_ms, o.energy_mj);
            if with_drop {
                let _ = write!(s, ",{}", o.acc_drop.unwrap_or(0.0));
            }
            let _ = writeln!(s, ",{},{}", m.rank, m.feasible);
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        std::fs::write(csv_path, self.to_csv()).map_err(|e| Error::io(csv_path, e))?;
        std::fs::write(json_path, self.to_json()? + "\n").map_err(|e| Error::io(json_path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Everything needed to score a partition. Scores are memoized per assignment.
#[derive(Debug)]
pub struct EvalContext {
    model: Arc<ModelGraph>,
    dataset: Arc<LabeledDataset>,
    table: ProfileTable,
    fault: FaultConfig,
    catalog: DeviceCatalog,
    mode: OptimizationMode,
    trials: usize,
    clean_top1: f64,
    cache: Mutex<HashMap<Vec<usize>, Individual>>,
    injections: AtomicU64,
    evaluations: AtomicU64,
}

impl EvalContext {
    pub fn new(
        model: Arc<ModelGraph>,
        dataset: Arc<LabeledDataset>,
        table: ProfileTable,
        fault: FaultConfig,
        catalog: DeviceCatalog,
        mode: OptimizationMode,
    ) -> Result<Self> {
        fault.validate()?;
        if fault.precision != model.bit_width() {
            return Err(Error::InvalidArgument(format!(
                "fault precision {} differs from model bit width {}",
                fault.precision,
                model.bit_width()
            )));
        }
        table.check_against(&model, &catalog)?;
        dataset.check_against(&model)?;
        let clean_top1 = evaluate_accuracy(&model, &dataset, None)?.top1;
        Ok(Self {
            model,
            dataset,
            table,
            fault,
            catalog,
            mode,
            trials: 1,
            clean_top1,
            cache: Mutex::new(HashMap::new()),
            injections: AtomicU64::new(0),
            evaluations: AtomicU64::new(0),
        })
    }

    /// Number of faulty evaluations averaged per partition.
    pub fn with_trials(mut self, trials: usize) -> Result<Self> {
        if trials == 0 {
            return Err(Error::InvalidArgument("trials must be at least 1".into()));
        }
        self.trials = trials;
        Ok(self)
    }

    /// Fresh context sharing model, dataset, catalog and clean accuracy, with
    /// new fault settings and cost table.
    pub fn retargeted(&self, fault: FaultConfig, table: ProfileTable) -> Result<Self> {
        fault.validate()?;
        table.check_against(&self.model, &self.catalog)?;
        Ok(Self {
            model: Arc::clone(&self.model),
            dataset: Arc::clone(&self.dataset),
            table,
            fault,
            catalog: self.catalog.clone(),
            mode: self.mode,
            trials: self.trials,
            clean_top1: self.clean_top1,
            cache: Mutex::new(HashMap::new()),
            injections: AtomicU64::new(0),
            evaluations: AtomicU64::new(0),
        })
    }

    pub fn model(&self) -> &ModelGraph {
        &self.model
    }

    pub fn dataset(&self) -> &LabeledDataset {
        &self.dataset
    }

    pub fn table(&self) -> &ProfileTable {
        &self.table
    }

    pub fn fault(&self) -> &FaultConfig {
        &self.fault
    }

    pub fn catalog(&self) -> &DeviceCatalog {
        &self.catalog
    }

    pub fn mode(&self) -> OptimizationMode {
        self.mode
    }

    pub fn trials(&self) -> usize {
        self.trials
    }

    pub fn clean_top1(&self) -> f64 {
        self.clean_top1
    }

    pub fn num_layers(&self) -> usize {
        self.model.num_layers()
    }

    pub fn num_devices(&self) -> usize {
        self.catalog.len()
    }

    /// Faulty accuracy evaluations run so far.
    pub fn injection_count(&self) -> u64 {
        self.injections.load(AtomicOrdering::Relaxed)
    }

    /// Distinct partitions scored so far.
    pub fn evaluation_count(&self) -> u64 {
        self.evaluations.load(AtomicOrdering::Relaxed)
    }

    /// Mean faulty Top-1 of `partition` over the context's trials.
    pub fn faulty_top1(&self, partition: &Partition) -> Result<f64> {
        let eval_id = partition.genome_hash();
        let base = build_fault_plan(&self.fault, partition, &self.catalog, eval_id)?;
        if base.is_inert() {
            return Ok(self.clean_top1);
        }
        let mut sum = 0.0;
        for t in 0..self.trials {
            let plan = if t == 0 {
                base.clone()
            } else {
                base.with_stream(base.rng.derive(TRIAL_TAG ^ t as u64))
            };
            self.injections.fetch_add(1, AtomicOrdering::Relaxed);
            sum += evaluate_accuracy(&self.model, &self.dataset, Some(&plan))?.top1;
        }
        Ok(sum / self.trials as f64)
    }
}

fn check_partition(partition: &Partition, ctx: &EvalContext) -> Result<()> {
    if partition.num_layers() != ctx.num_layers() {
        return Err(Error::InvalidArgument(format!(
            "partition has {} genes, model has {} layers",
            partition.num_layers(),
            ctx.num_layers()
        )));
    }
    if let Some(&d) = partition.assignment().iter().find(|&&d| d >= ctx.num_devices()) {
        return Err(Error::InvalidArgument(format!(
            "partition uses device {d}, catalog has {}",
            ctx.num_devices()
        )));
    }
    Ok(())
}

/// Scores one partition. Fault draws are seeded from the genome, so the result
/// depends only on the assignment and the context.
pub fn evaluate_individual(partition: &Partition, ctx: &EvalContext) -> Result<Individual> {
    check_partition(partition, ctx)?;
    if let Some(hit) = ctx.cache.lock().unwrap().get(partition.assignment()) {
        return Ok(hit.clone());
    }
    let verdict = check_resource_constraints(partition, &ctx.model, &ctx.catalog);
    let acc_drop = match ctx.mode {
        OptimizationMode::FaultAware => Some(ctx.clean_top1 - ctx.faulty_top1(partition)?),
        OptimizationMode::FaultUnaware => None,
    };
    let ind = Individual {
        partition: partition.clone(),
        objectives: ObjectiveVector {
            latency_ms: estimate_latency(partition, &ctx.table),
            energy_mj: estimate_energy(partition, &ctx.table),
            acc_drop,
        },
        rank: 0,
        crowding: 0.0,
        feasible: verdict.feasible,
        violation: verdict.total_violation(),
        eval_id: partition.genome_hash(),
    };
    ctx.evaluations.fetch_add(1, AtomicOrdering::Relaxed);
    ctx.cache
        .lock()
        .unwrap()
        .insert(partition.assignment().to_vec(), ind.clone());
    Ok(ind)
}

/// Scores a batch, running distinct uncached partitions in parallel.
pub fn evaluate_batch(partitions: &[Partition], ctx: &EvalContext) -> Result<Vec<Individual>> {
    let mut seen = HashSet::new();
    let fresh: Vec<&Partition> = {
        let cache = ctx.cache.lock().unwrap();
        partitions
            .iter()
            .filter(|p| !cache.contains_key(p.assignment()) && seen.insert(p.assignment()))
            .collect()
    };
    fresh
        .par_iter()
        .map(|p| evaluate_individual(p, ctx).map(|_| ()))
        .collect::<Result<Vec<()>>>()?;
    partitions.iter().map(|p| evaluate_individual(p, ctx)).collect()
}

/// Peels the population into fronts under constrained dominance, setting each
/// member's `rank`. Indices within a front are ascending.
pub fn non_dominated_sort(population: &mut [Individual]) -> Vec<Vec<usize>> {
    let n = population.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates_list: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if population[i].constrained_dominates(&population[j]) {
                dominates_list[i].push(j);
                dominated_by[j] += 1;
            } else if population[j].constrained_dominates(&population[i]) {
                dominates_list[j].push(i);
                dominated_by[i] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            population[i].rank = fronts.len();
            for &j in &dominates_list[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    fronts
}

/// Crowding distance of each point within one front. Boundary points per
/// objective are infinite; an objective with zero range adds nothing.
pub fn crowding_distance(objectives: &[ObjectiveVector]) -> Vec<f64> {
    let n = objectives.len();
    let mut dist = vec![0.0; n];
    if n <= 2 {
        return vec![f64::INFINITY; n];
    }
    let values: Vec<Vec<f64>> = objectives.iter().map(ObjectiveVector::values).collect();
    for m in 0..values[0].len() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| values[a][m].total_cmp(&values[b][m]).then(a.cmp(&b)));
        let lo = values[order[0]][m];
        let hi = values[order[n - 1]][m];
        dist[order[0]] = f64::INFINITY;
        dist[order[n - 1]] = f64::INFINITY;
        let range = hi - lo;
        if range <= 0.0 {
            continue;
        }
        for k in 1..n - 1 {
            let i = order[k];
            dist[i] += (values[order[k + 1]][m] - values[order[k - 1]][m]) / range;
        }
    }
    dist
}

fn assign_rank_and_crowding(population: &mut [Individual]) -> Vec<Vec<usize>> {
    let fronts = non_dominated_sort(population);
    for front in &fronts {
        let objs: Vec<ObjectiveVector> = front.iter().map(|&i| population[i].objectives).collect();
        for (&i, c) in front.iter().zip(crowding_distance(&objs)) {
            population[i].crowding = c;
        }
    }
    fronts
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariationParams {
    pub crossover_rate: f64,
    pub mutation_rate: f64,
}

fn crowded_better(a: &Individual, b: &Individual) -> bool {
    a.rank < b.rank || (a.rank == b.rank && a.crowding > b.crowding)
}

fn tournament<'a, R: Rng + ?Sized>(parents: &'a [Individual], rng: &mut R) -> &'a Individual {
    let a = &parents[rng.random_range(0..parents.len())];
    let b = &parents[rng.random_range(0..parents.len())];
    if crowded_better(b, a) {
        b
    } else {
        a
    }
}

/// Builds `parents.len()` children by binary tournament, single-point
/// crossover and per-gene mutation to a different device.
pub fn make_offspring<R: Rng + ?Sized>(
    parents: &[Individual],
    num_devices: usize,
    params: VariationParams,
    rng: &mut R,
) -> Vec<Partition> {
    let n = parents.len();
    let mut children = Vec::with_capacity(n + 1);
    while children.len() < n {
        let mut a = tournament(parents, rng).partition.assignment().to_vec();
        let mut b = tournament(parents, rng).partition.assignment().to_vec();
        let l = a.len();
        if l > 1 && rng.random::<f64>() < params.crossover_rate {
            let cut = rng.random_range(1..l);
            a[cut..].swap_with_slice(&mut b[cut..]);
        }
        for genes in [&mut a, &mut b] {
            if num_devices > 1 {
                for g in genes.iter_mut() {
                    if rng.random::<f64>() < params.mutation_rate {
                        let other = rng.random_range(0..num_devices - 1);
                        *g = if other >= *g { other + 1 } else { other };
                    }
                }
            }
        }
        children.push(Partition::from_genes_unchecked(a));
        children.push(Partition::from_genes_unchecked(b));
    }
    children.truncate(n);
    children
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub population: usize,
    pub generations: usize,
    pub seed: u64,
    pub crossover_rate: f64,
    /// Per-gene mutation probability; `None` means one over the layer count.
    pub mutation_rate: Option<f64>,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            population: 60,
            generations: 60,
            seed: 0,
            crossover_rate: 0.9,
            mutation_rate: None,
        }
    }
}

impl OptimizerParams {
    pub fn validate(&self) -> Result<()> {
        if self.population < 4 || !self.population.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "population must be even and at least 4, got {}",
                self.population
            )));
        }
        if self.generations == 0 {
            return Err(Error::InvalidArgument("generations must be at least 1".into()));
        }
        let rates = [Some(self.crossover_rate), self.mutation_rate];
        if rates.iter().flatten().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::InvalidArgument(
                "crossover and mutation rates must lie in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Keeps `n` survivors from parents plus children: distinct genomes first,
/// filled front by front with crowding as the tie-breaker, then duplicates if
/// there are fewer than `n` distinct genomes.
fn survive(combined: Vec<Individual>, n: usize) -> Vec<Individual> {
    let mut seen = HashSet::new();
    let (mut unique, dups): (Vec<Individual>, Vec<Individual>) = combined
        .into_iter()
        .partition(|ind| seen.insert(ind.partition.assignment().to_vec()));
    let fronts = assign_rank_and_crowding(&mut unique);
    let mut keep = Vec::with_capacity(n);
    for front in fronts {
        if keep.len() + front.len() <= n {
            keep.extend(front);
        } else {
            let mut f = front;
            f.sort_by(|&a, &b| unique[b].crowding.total_cmp(&unique[a].crowding).then(a.cmp(&b)));
            f.truncate(n - keep.len());
            keep.extend(f);
        }
        if keep.len() == n {
            break;
        }
    }
    keep.sort_unstable();
    let mut survivors: Vec<Individual> = keep.into_iter().map(|i| unique[i].clone()).collect();
    survivors.extend(dups.into_iter().take(n - survivors.len()));
    assign_rank_and_crowding(&mut survivors);
    survivors
}

fn front_of(population: &[Individual]) -> Vec<Individual> {
    let mut members: Vec<Individual> = population
        .iter()
        .filter(|i| i.rank == 0 && i.feasible)
        .cloned()
        .collect();
    members.sort_by(|a, b| a.partition.cmp(&b.partition));
    members.dedup_by(|a, b| a.partition == b.partition);
    members
}

/// Observer hook called after the initial population and after every generation.
pub type GenerationObserver<'a> = dyn FnMut(usize, &[Individual]) + 'a;

pub fn optimize(
    ctx: &EvalContext,
    params: &OptimizerParams,
    initial: Option<&[Partition]>,
    mut observer: Option<&mut GenerationObserver<'_>>,
) -> Result<ParetoFront> {
    params.validate()?;
    let n = params.population;
    let l = ctx.num_layers();
    let d = ctx.num_devices();
    let variation = VariationParams {
        crossover_rate: params.crossover_rate,
        mutation_rate: params.mutation_rate.unwrap_or(1.0 / l as f64),
    };
    let mut rng = RngStream::new(params.seed, OPTIMIZER_STREAM).rng();
    let mut start: Vec<Partition> = initial.unwrap_or_default().iter().take(n).cloned().collect();
    while start.len() < n {
        start.push(Partition::from_genes_unchecked(
            (0..l).map(|_| rng.random_range(0..d)).collect(),
        ));
    }
    let mut population = evaluate_batch(&start, ctx)?;
    assign_rank_and_crowding(&mut population);
    if let Some(obs) = observer.as_mut() {
        obs(0, &population);
    }
    for generation in 1..=params.generations {
        let children = make_offspring(&population, d, variation, &mut rng);
        let mut combined = population;
        combined.extend(evaluate_batch(&children, ctx)?);
        population = survive(combined, n);
        if let Some(obs) = observer.as_mut() {
            obs(generation, &population);
        }
        log::debug!("generation {generation}: {} evaluations", ctx.evaluation_count());
    }
    Ok(ParetoFront {
        members: front_of(&population),
        metadata: FrontMetadata {
            generations: params.generations,
            population: n,
            seed: params.seed,
            config_digest: String::new(),
            mode: ctx.mode(),
            evaluations: ctx.evaluation_count(),
        },
    })
}

/// Size of the search space, saturating at `u128::MAX`.
pub fn search_space_size(num_layers: usize, num_devices: usize) -> u128 {
    (num_devices as u128)
        .checked_pow(num_layers as u32)
        .unwrap_or(u128::MAX)
}

/// Exact front by scoring every partition.
pub fn enumerate(ctx: &EvalContext, guard: u128) -> Result<ParetoFront> {
    let size = search_space_size(ctx.num_layers(), ctx.num_devices());
    if size > guard {
        return Err(Error::Guard { size, guard });
    }
    let all: Vec<Partition> = (0..size)
        .map(|i| Partition::from_index(i, ctx.num_layers(), ctx.num_devices()))
        .collect();
    let mut population = evaluate_batch(&all, ctx)?;
    assign_rank_and_crowding(&mut population);
    Ok(ParetoFront {
        members: front_of(&population),
        metadata: FrontMetadata {
            generations: 0,
            population: all.len(),
            seed: ctx.fault().seed,
            config_digest: String::new(),
            mode: ctx.mode(),
            evaluations: ctx.evaluation_count(),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    #[default]
    MinAccDrop,
    Knee,
}

impl std::str::FromStr for SelectionPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "min_acc_drop" => Ok(Self::MinAccDrop),
            "knee" => Ok(Self::Knee),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeploymentCaps {
    pub max_latency_ms: Option<f64>,
    pub max_energy_mj: Option<f64>,
}

impl DeploymentCaps {
    pub fn admits(&self, o: &ObjectiveVector) -> bool {
        self.max_latency_ms.is_none_or(|c| o.latency_ms <= c) && self.max_energy_mj.is_none_or(|c| o.energy_mj <= c)
    }

    /// Caps `slack` above the front's lowest latency and lowest energy.
    pub fn relative_to(front: &ParetoFront, slack: f64) -> Self {
        let min = |f: fn(&ObjectiveVector) -> f64| {
            front
                .members
                .iter()
                .map(|m| f(&m.objectives))
                .fold(f64::INFINITY, f64::min)
        };
        Self {
            max_latency_ms: Some(min(|o| o.latency_ms) * (1.0 + slack)),
            max_energy_mj: Some(min(|o| o.energy_mj) * (1.0 + slack)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deployment {
    pub partition: Partition,
    pub objectives: ObjectiveVector,
    pub policy: SelectionPolicy,
    /// Set when no member met the caps and they were ignored.
    pub caps_relaxed: bool,
}

fn min_acc_drop_order(a: &Individual, b: &Individual) -> Ordering {
    let drop = |i: &Individual| i.objectives.acc_drop.unwrap_or(0.0);
    drop(a)
        .total_cmp(&drop(b))
        .then(a.objectives.latency_ms.total_cmp(&b.objectives.latency_ms))
        .then(a.objectives.energy_mj.total_cmp(&b.objectives.energy_mj))
        .then(a.partition.cmp(&b.partition))
}

/// Normalized distance of each candidate to the per-objective ideal point.
pub fn knee_distances(candidates: &[&Individual]) -> Vec<f64> {
    let values: Vec<Vec<f64>> = candidates.iter().map(|c| c.objectives.values()).collect();
    let m = values.first().map_or(0, Vec::len);
    let mut dist = vec![0.0; values.len()];
    for k in 0..m {
        let lo = values.iter().map(|v| v[k]).fold(f64::INFINITY, f64::min);
        let hi = values.iter().map(|v| v[k]).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (d, v) in dist.iter_mut().zip(&values) {
                *d += ((v[k] - lo) / (hi - lo)).powi(2);
            }
        }
    }
    dist.into_iter().map(f64::sqrt).collect()
}

pub fn select_deployment(
    front: &ParetoFront,
    policy: SelectionPolicy,
    caps: Option<DeploymentCaps>,
) -> Result<Deployment> {
    if front.is_empty() {
        return Err(Error::Infeasible(
            "cannot select a deployment from an empty front".into(),
        ));
    }
    let caps = caps.unwrap_or_default();
    let mut candidates: Vec<&Individual> = front.members.iter().filter(|m| caps.admits(&m.objectives)).collect();
    let caps_relaxed = candidates.is_empty();
    if caps_relaxed {
        log::warn!("no front member satisfies the deployment caps; ignoring them");
        candidates = front.members.iter().collect();
    }
    let chosen = match policy {
        SelectionPolicy::MinAccDrop => candidates.into_iter().min_by(|a, b| min_acc_drop_order(a, b)),
        SelectionPolicy::Knee => {
            let dist = knee_distances(&candidates);
            candidates
                .iter()
                .zip(dist)
                .min_by(|(a, da), (b, db)| da.total_cmp(db).then(a.partition.cmp(&b.partition)))
                .map(|(c, _)| *c)
        }
    }
    .expect("candidates are non-empty");
    Ok(Deployment {
        partition: chosen.partition.clone(),
        objectives: chosen.objectives,
        policy,
        caps_relaxed,
    })
}
