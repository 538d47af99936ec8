//! TOML run configuration with dotted-path overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cost::{generate_synthetic_profiles, load_profiles, ProfileTable};
use crate::error::{Error, Result};
use crate::experiments::Setup;
use crate::fault::{DeviceCatalog, FaultConfig, InjectionStrategy};
use crate::model::{generate_toy_model, load_model, LabeledDataset, ModelGraph, ToyArch};
use crate::nsga2::{OptimizationMode, OptimizerParams, SelectionPolicy, DEFAULT_ENUMERATION_GUARD};

/// With neither `toy` nor `path` set, the tiny_cnn toy model is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub toy: Option<ToyArch>,
    pub toy_seed: u64,
    pub path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            toy: None,
            toy_seed: 7,
            path: None,
        }
    }
}

impl ModelSection {
    pub fn toy_arch(&self) -> Option<ToyArch> {
        match (&self.toy, &self.path) {
            (Some(a), _) => Some(*a),
            (None, None) => Some(ToyArch::TinyCnn),
            (None, Some(_)) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    /// Directory written by `LabeledDataset::save`; defaults to the toy dataset.
    pub path: Option<PathBuf>,
    /// Samples used by the optimizer; the rest are held out. Defaults to half.
    pub search_samples: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    pub seed: u64,
    pub skew: f64,
}

/// Default latency multipliers of the two-device edge catalog.
pub const DEFAULT_LATENCY_FACTORS: [f64; 2] = [1.0, 1.5];
/// Default energy multipliers of the two-device edge catalog.
pub const DEFAULT_ENERGY_FACTORS: [f64; 2] = [1.0, 1.25];

/// At most one source may be set; with none, MAC-proportional costs with the
/// default factors are used.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticProfile>,
    /// Per-device multipliers on MAC-proportional costs.
    pub latency_factors: Option<Vec<f64>>,
    pub energy_factors: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaultSection {
    pub precision: u32,
    pub fault_rates: [f64; 2],
    pub faulty_bits: u32,
    pub budget: Option<u64>,
    pub strategy: InjectionStrategy,
}

impl Default for FaultSection {
    fn default() -> Self {
        let f = FaultConfig::default();
        Self {
            precision: f.precision,
            fault_rates: f.fault_rates,
            faulty_bits: f.faulty_bits,
            budget: f.budget,
            strategy: InjectionStrategy::PlatformSpecific { device: 0 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: Option<f64>,
    pub mode: OptimizationMode,
    /// Faulty evaluations averaged per partition.
    pub trials: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let p = OptimizerParams::default();
        Self {
            population: p.population,
            generations: p.generations,
            crossover_rate: p.crossover_rate,
            mutation_rate: p.mutation_rate,
            mode: OptimizationMode::FaultAware,
            trials: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeploymentSection {
    pub policy: SelectionPolicy,
    /// Allowed latency and energy overhead over the front's cheapest members.
    pub overhead_slack: Option<f64>,
}

impl Default for DeploymentSection {
    fn default() -> Self {
        Self {
            policy: SelectionPolicy::MinAccDrop,
            overhead_slack: Some(0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub sweep_rates: Vec<f64>,
    pub compare_rate: f64,
    /// Seeds averaged by sweep and compare: `seed, seed + 1, ...`.
    pub seeds: usize,
    pub enumeration_guard: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            sweep_rates: vec![0.1, 0.2, 0.3, 0.4],
            compare_rate: 0.2,
            seeds: 20,
            enumeration_guard: DEFAULT_ENUMERATION_GUARD as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub dataset: DatasetSection,
    pub catalog: Option<DeviceCatalog>,
    pub profile: ProfileSection,
    pub fault: FaultSection,
    pub optimizer: OptimizerSection,
    pub deployment: DeploymentSection,
    pub experiment: ExperimentSection,
    /// Runtime scenario file for `simulate`.
    pub scenario: Option<PathBuf>,
    /// Directory relative paths are resolved against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::config(path, message)
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `key.path=value` to `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(assignment, "override must look like key.path=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(key, "empty path segment"));
    }
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(&parts[..=i].join("."), "is not a table"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Loads `path` (or defaults when `None`) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let (mut table, base_dir, label) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(&p.display().to_string(), format!("cannot read: {e}")))?;
                let table: toml::Table =
                    toml::from_str(&text).map_err(|e| config_err(&p.display().to_string(), e.to_string()))?;
                let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
                (table, base, p.display().to_string())
            }
            None => (toml::Table::new(), PathBuf::new(), "<defaults>".to_string()),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(&label, e.to_string()))?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.toy.is_some() && self.model.path.is_some() {
            return Err(config_err("model", "set exactly one of `toy` and `path`"));
        }
        if self.model.toy_arch().is_none() && self.dataset.path.is_none() {
            return Err(config_err(
                "dataset.path",
                "required when the model is loaded from a file",
            ));
        }
        let p = &self.profile;
        let factors = p.latency_factors.is_some() || p.energy_factors.is_some();
        let sources = [p.path.is_some(), p.synthetic.is_some(), factors]
            .iter()
            .filter(|&&b| b)
            .count();
        if sources > 1 {
            return Err(config_err(
                "profile",
                "set exactly one of `path`, `synthetic` or `latency_factors`/`energy_factors`",
            ));
        }
        if factors && (p.latency_factors.is_none() || p.energy_factors.is_none()) {
            return Err(config_err(
                "profile",
                "`latency_factors` and `energy_factors` go together",
            ));
        }
        if let Some(s) = &p.synthetic {
            if !(s.skew >= 1.0) {
                return Err(config_err("profile.synthetic.skew", "must be at least 1"));
            }
        }
        self.fault_config(self.seed)
            .validate()
            .map_err(|e| config_err("fault", e.to_string()))?;
        self.optimizer_params(self.seed)
            .validate()
            .map_err(|e| config_err("optimizer", e.to_string()))?;
        if self.optimizer.trials == 0 {
            return Err(config_err("optimizer.trials", "must be at least 1"));
        }
        if let Some(s) = self.deployment.overhead_slack {
            if !(s >= 0.0) {
                return Err(config_err("deployment.overhead_slack", "must be non-negative"));
            }
        }
        let e = &self.experiment;
        if e.seeds == 0 {
            return Err(config_err("experiment.seeds", "must be at least 1"));
        }
        if let Some(r) = e
            .sweep_rates
            .iter()
            .chain([&e.compare_rate])
            .find(|r| !(0.0..=1.0).contains(*r))
        {
            return Err(config_err("experiment", format!("rate {r} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn fault_config(&self, seed: u64) -> FaultConfig {
        let f = &self.fault;
        FaultConfig {
            precision: f.precision,
            fault_rates: f.fault_rates,
            faulty_bits: f.faulty_bits,
            budget: f.budget,
            strategy: f.strategy,
            seed,
        }
    }

    pub fn optimizer_params(&self, seed: u64) -> OptimizerParams {
        let o = &self.optimizer;
        OptimizerParams {
            population: o.population,
            generations: o.generations,
            seed,
            crossover_rate: o.crossover_rate,
            mutation_rate: o.mutation_rate,
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.experiment.seeds as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    /// SHA-256 of the canonical JSON form of the configuration.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let hash = Sha256::digest(json.as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn catalog(&self) -> DeviceCatalog {
        self.catalog.clone().unwrap_or_else(DeviceCatalog::edge_pair)
    }

    pub fn load_model_and_data(&self) -> Result<(ModelGraph, LabeledDataset)> {
        let (model, toy_data) = match (self.model.toy_arch(), &self.model.path) {
            (Some(arch), _) => {
                let (m, d) = generate_toy_model(arch, self.model.toy_seed);
                (m, Some(d))
            }
            (None, p) => (load_model(&self.resolve(p.as_ref().expect("validated")))?, None),
        };
        let data = match &self.dataset.path {
            Some(p) => LabeledDataset::load(&self.resolve(p))?,
            None => toy_data.expect("validated"),
        };
        data.check_against(&model)?;
        Ok((model, data))
    }

    pub fn profile_table(&self, model: &ModelGraph, catalog: &DeviceCatalog) -> Result<ProfileTable> {
        let p = &self.profile;
        let table = if let Some(path) = &p.path {
            load_profiles(&self.resolve(path), model, catalog)?
        } else if let Some(s) = &p.synthetic {
            generate_synthetic_profiles(model, catalog, s.seed, s.skew)?
        } else {
            ProfileTable::from_device_factors(
                model,
                p.latency_factors.as_deref().unwrap_or(&DEFAULT_LATENCY_FACTORS),
                p.energy_factors.as_deref().unwrap_or(&DEFAULT_ENERGY_FACTORS),
            )?
        };
        table.check_against(model, catalog)?;
        Ok(table)
    }

    /// Model, data split, profiles and settings ready for experiments.
    pub fn setup(&self) -> Result<Setup> {
        let (model, data) = self.load_model_and_data()?;
        let catalog = self.catalog();
        let table = self.profile_table(&model, &catalog)?;
        let n = self.dataset.search_samples.unwrap_or(data.len() / 2);
        if n == 0 || n >= data.len() {
            return Err(config_err(
                "dataset.search_samples",
                format!("must leave held-out samples: {n} of {}", data.len()),
            ));
        }
        let (search, held_out) = data.split(n)?;
        Ok(Setup {
            model: Arc::new(model),
            search_set: Arc::new(search),
            eval_set: Arc::new(held_out),
            table,
            catalog,
            fault: self.fault_config(self.seed),
            optimizer: self.optimizer_params(self.seed),
            trials: self.optimizer.trials,
            policy: self.deployment.policy,
            overhead_slack: self.deployment.overhead_slack,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.optimizer.population, 60);
        assert_eq!(cfg.fault.fault_rates, [0.2, 0.2]);
        assert_eq!(cfg.experiment.sweep_rates, vec![0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = RunConfig::load(
            None,
            &[
                "optimizer.population=20".into(),
                "fault.fault_rates=[0.1, 0.3]".into(),
                "optimizer.mode=fault_unaware".into(),
                "fault.strategy.kind=all_layers".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.optimizer.population, 20);
        assert_eq!(cfg.fault.fault_rates, [0.1, 0.3]);
        assert_eq!(cfg.optimizer.mode, OptimizationMode::FaultUnaware);
        assert_eq!(cfg.fault.strategy, InjectionStrategy::AllLayers);
    }

    #[test]
    fn errors_name_the_field() {
        let err = RunConfig::load(None, &["optimizer.population=5".into()]).unwrap_err();
        assert!(err.to_string().contains("optimizer"), "{err}");
        let err = RunConfig::load(None, &["optimizer.populaton=10".into()]).unwrap_err();
        assert!(err.to_string().contains("populaton"), "{err}");
        let both = [
            "profile.synthetic={ seed = 1, skew = 2.0 }".into(),
            "profile.path=p.csv".into(),
        ];
        assert!(RunConfig::load(None, &both).is_err());
        assert!(RunConfig::load(None, &["profile.synthetic={ seed = 1, skew = 2.0 }".into()]).is_ok());
        assert!(RunConfig::load(None, &["model.toy=tiny_resnet".into(), "model.path=m.json".into()]).is_err());
        assert!(RunConfig::load(None, &["model.path=m.json".into()]).is_err());
        assert!(RunConfig::load(None, &["nonsense".into()]).is_err());
    }

    #[test]
    fn digest_tracks_content() {
        let a = RunConfig::load(None, &[]).unwrap();
        let b = RunConfig::load(None, &["seed=1".into()]).unwrap();
        assert_eq!(a.digest(), RunConfig::load(None, &[]).unwrap().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn file_config_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 4\n[optimizer]\ngenerations = 3\n").unwrap();
        let cfg = RunConfig::load(Some(&path), &[]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.optimizer.generations, 3);
        assert_eq!(cfg.resolve(Path::new("x.csv")), dir.path().join("x.csv"));
    }

    #[test]
    fn setup_splits_dataset() {
        let s = RunConfig::load(None, &[]).unwrap().setup().unwrap();
        assert_eq!(s.search_set.len(), 128);
        assert_eq!(s.eval_set.len(), 128);
        assert!(RunConfig::load(None, &["dataset.search_samples=256".into()])
            .unwrap()
            .setup()
            .is_err());
    }
}
