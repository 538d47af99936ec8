//! Command implementations behind the `afarepart` binary. Each command writes
//! its outputs plus a `manifest.json` into the output directory.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::cost::generate_synthetic_profiles;
use crate::error::{Error, Result};
use crate::experiments::{compare, sweep};
use crate::fault::DeviceCatalog;
use crate::model::{generate_toy_model, save_model};
use crate::nsga2::{enumerate, optimize, select_deployment, DeploymentCaps, ParetoFront};
use crate::online::{simulate_online, OnlineParams, RuntimeScenario};

/// Skew of the synthetic profiles written by `gen-toy`.
pub const TOY_PROFILE_SKEW: f64 = 2.0;

/// Process exit code for an error: 2 for configuration problems, 3 for
/// infeasible searches and guard violations, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) => 2,
        Error::Infeasible(_) | Error::Guard { .. } => 3,
        _ => 1,
    }
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    tool: &'static str,
    version: &'static str,
    seed: u64,
    config_digest: String,
    config: &'a RunConfig,
    outputs: Vec<String>,
}

/// Files written by a command and a short human-readable summary.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutput {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

struct Writer<'a> {
    dir: &'a Path,
    files: Vec<PathBuf>,
}

impl<'a> Writer<'a> {
    fn new(dir: &'a Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self { dir, files: Vec::new() })
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    fn finish(mut self, command: &str, cfg: &RunConfig, summary: String) -> Result<CommandOutput> {
        let outputs = self
            .files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        let manifest = Manifest {
            command,
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            config_digest: cfg.digest(),
            config: cfg,
            outputs,
        };
        self.json("manifest.json", &manifest)?;
        Ok(CommandOutput {
            files: self.files,
            summary,
        })
    }
}

fn stamp(mut front: ParetoFront, cfg: &RunConfig) -> ParetoFront {
    front.metadata.config_digest = cfg.digest();
    front
}

pub fn cmd_optimize(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let setup = cfg.setup()?;
    let ctx = setup.context(cfg.optimizer.mode, &setup.fault)?;
    let front = stamp(optimize(&ctx, &setup.optimizer, None, None)?, cfg);
    if front.is_empty() {
        return Err(Error::Infeasible(
            "every partition in the final population violates device caps".into(),
        ));
    }
    let caps = cfg
        .deployment
        .overhead_slack
        .map(|s| DeploymentCaps::relative_to(&front, s));
    let deployment = select_deployment(&front, cfg.deployment.policy, caps)?;
    let mut w = Writer::new(out)?;
    w.write("front.csv", &front.to_csv())?;
    w.json("front.json", &front)?;
    w.json("deployment.json", &deployment)?;
    let summary = format!(
        "front of {} partitions after {} evaluations; deployed {} (latency {:.4} ms, energy {:.4} mJ{})",
        front.len(),
        front.metadata.evaluations,
        deployment.partition,
        deployment.objectives.latency_ms,
        deployment.objectives.energy_mj,
        deployment
            .objectives
            .acc_drop
            .map(|d| format!(", accuracy drop {:.2}%", d * 100.0))
            .unwrap_or_default()
    );
    w.finish("optimize", cfg, summary)
}

pub fn cmd_enumerate(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let setup = cfg.setup()?;
    let ctx = setup.context(cfg.optimizer.mode, &setup.fault)?;
    let front = stamp(enumerate(&ctx, cfg.experiment.enumeration_guard as u128)?, cfg);
    let mut w = Writer::new(out)?;
    w.write("enumerate_front.csv", &front.to_csv())?;
    w.json("enumerate_front.json", &front)?;
    let summary = format!(
        "exact front of {} partitions from {} evaluations",
        front.len(),
        front.metadata.evaluations
    );
    w.finish("enumerate", cfg, summary)
}

pub fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let setup = cfg.setup()?;
    let report = sweep(&setup, &cfg.experiment.sweep_rates, &cfg.seeds())?;
    let mut w = Writer::new(out)?;
    w.write("sweep.csv", &report.to_csv())?;
    w.json("sweep.json", &report)?;
    let mut summary = String::from("method         rate   top1 %  +/- 95%\n");
    for r in &report.rows {
        summary += &format!(
            "{:<14} {:>4.0}%  {:>6.2}  {:>6.2}\n",
            crate::experiments::mode_name(r.method),
            r.fault_rate * 100.0,
            r.top1.mean * 100.0,
            r.top1.ci95 * 100.0
        );
    }
    w.finish("sweep", cfg, summary)
}

pub fn cmd_compare(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let setup = cfg.setup()?;
    let report = compare(&setup, cfg.experiment.compare_rate, &cfg.seeds())?;
    let mut w = Writer::new(out)?;
    w.write("comparison.csv", &report.to_csv())?;
    w.write("comparison_deltas.csv", &report.deltas_csv())?;
    w.json("comparison.json", &report)?;
    let summary = report.render();
    w.finish("compare", cfg, summary)
}

pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let path = cfg
        .scenario
        .as_ref()
        .ok_or_else(|| Error::config("scenario", "simulate needs a scenario file"))?;
    let scenario = RuntimeScenario::load(&cfg.resolve(path))?;
    let setup = cfg.setup()?;
    let (_, initial) = setup.deploy(cfg.optimizer.mode, &setup.fault, cfg.seed)?;
    let ctx = setup.context(cfg.optimizer.mode, &setup.fault)?;
    let params = OnlineParams {
        optimizer: setup.optimizer,
        caps_slack: cfg.deployment.overhead_slack,
    };
    let trace = simulate_online(&initial.partition, &scenario, &ctx, &setup.eval_set, &params)?;
    let mut w = Writer::new(out)?;
    w.write("trace.csv", &trace.to_csv())?;
    w.json("trace.json", &trace)?;
    let summary = format!(
        "{} windows, {} repartitions {:?}; started on {}, ended on {}",
        trace.summary.windows,
        trace.summary.triggers,
        trace.summary.triggers_per_epoch,
        initial.partition,
        trace.summary.final_partition
    );
    w.finish("simulate", cfg, summary)
}

/// Writes the toy model, its dataset, synthetic profiles and a ready-to-use
/// `config.toml` referring to them.
pub fn cmd_gen_toy(cfg: &RunConfig, out: &Path) -> Result<CommandOutput> {
    let arch = cfg
        .model
        .toy_arch()
        .ok_or_else(|| Error::config("model.toy", "gen-toy needs a toy architecture"))?;
    let (model, data) = generate_toy_model(arch, cfg.model.toy_seed);
    let catalog = cfg.catalog.clone().unwrap_or_else(DeviceCatalog::edge_pair);
    let profiles = generate_synthetic_profiles(&model, &catalog, cfg.model.toy_seed, TOY_PROFILE_SKEW)?;
    let mut w = Writer::new(out)?;
    let model_path = save_model(&model, &out.join("model"))?;
    w.files.push(model_path);
    data.save(&out.join("data"))?;
    w.files.push(out.join("data"));
    w.write("profiles.csv", &profiles.to_csv())?;
    let generated = format!(
        "# generated by gen-toy: {} seed {}\n\n[model]\npath = \"model/model.json\"\n\n[dataset]\npath = \"data\"\n\n[profile]\npath = \"profiles.csv\"\n",
        arch.name(),
        cfg.model.toy_seed
    );
    w.write("config.toml", &generated)?;
    let summary = format!(
        "{} ({} layers, {} samples) written to {}",
        arch.name(),
        model.num_layers(),
        data.len(),
        out.display()
    );
    w.finish("gen-toy", cfg, summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(extra: &[&str]) -> RunConfig {
        let mut o: Vec<String> = [
            "optimizer.population=8",
            "optimizer.generations=3",
            "experiment.seeds=2",
            "dataset.search_samples=64",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        o.extend(extra.iter().map(|s| s.to_string()));
        RunConfig::load(None, &o).unwrap()
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::config("x", "y")), 2);
        assert_eq!(exit_code(&Error::Guard { size: 2, guard: 1 }), 3);
        assert_eq!(exit_code(&Error::Infeasible("x".into())), 3);
        assert_eq!(exit_code(&Error::Model("x".into())), 1);
    }

    #[test]
    fn optimize_writes_front_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let out = cmd_optimize(&quick(&[]), dir.path()).unwrap();
        for f in ["front.csv", "front.json", "deployment.json", "manifest.json"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert_eq!(out.files.len(), 4);
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["config_digest"], quick(&[]).digest());
        assert_eq!(manifest["outputs"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn unaware_front_has_no_drop_column() {
        let dir = tempfile::tempdir().unwrap();
        cmd_optimize(&quick(&["optimizer.mode=fault_unaware"]), dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("front.csv")).unwrap();
        assert_eq!(
            csv.lines().next().unwrap(),
            "assignment,latency_ms,energy_mj,rank,feasible"
        );
    }

    #[test]
    fn enumerate_guard_is_exit_three() {
        let dir = tempfile::tempdir().unwrap();
        let err = cmd_enumerate(&quick(&["experiment.enumeration_guard=10"]), dir.path()).unwrap_err();
        assert_eq!(exit_code(&err), 3);
    }

    #[test]
    fn simulate_without_scenario_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(exit_code(&cmd_simulate(&quick(&[]), dir.path()).unwrap_err()), 2);
    }
}
