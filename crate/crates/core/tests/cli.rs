use std::path::Path;
use std::process::{Command, Output};

use afarepart::config::RunConfig;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_afarepart"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_toy_is_reproducible_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["one", "two"] {
        let o = run(
            dir.path(),
            &["gen-toy", "--arch", "tiny_resnet", "--toy-seed", "11", "--out", out],
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let one = tree(&dir.path().join("one"));
    assert_eq!(one, tree(&dir.path().join("two")));
    assert!(one.iter().any(|(p, _)| p == "config.toml"));

    let cfg = RunConfig::load(Some(&dir.path().join("one/config.toml")), &[]).unwrap();
    let setup = cfg.setup().unwrap();
    assert_eq!(setup.model.name(), "tiny_resnet");
    assert_eq!(setup.table.num_layers(), setup.model.num_layers());
    assert_eq!(setup.search_set.len() + setup.eval_set.len(), 256);
}

#[test]
fn optimize_from_generated_config() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run(dir.path(), &["gen-toy", "--out", "toy"]).status.success());
    let o = run(
        dir.path(),
        &[
            "optimize",
            "--config",
            "toy/config.toml",
            "--set",
            "optimizer.population=12",
            "--set",
            "optimizer.generations=5",
            "--out",
            "res",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.starts_with("front of "), "{stdout}");
    let csv = std::fs::read_to_string(dir.path().join("res/front.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "assignment,latency_ms,energy_mj,acc_drop,rank,feasible"
    );
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["optimize", "--set", "bogus=1"][..],
        &["optimize", "--set", "optimizer.population=7"],
        &["optimize", "--config", "missing.toml"],
        &["simulate"],
        &["sweep", "--rates", "0.1,1.5"],
    ] {
        let o = run(dir.path(), args);
        assert_eq!(
            o.status.code(),
            Some(2),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
    }
}

#[test]
fn guard_violation_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["enumerate", "--set", "experiment.enumeration_guard=63", "--out", "e"],
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(!dir.path().join("e/enumerate_front.csv").exists());
}

#[test]
fn seed_flag_lands_in_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "enumerate",
            "--seed",
            "42",
            "--set",
            "dataset.search_samples=32",
            "--out",
            "e",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("e/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 42);
    assert_eq!(manifest["command"], "enumerate");
    assert_eq!(manifest["config_digest"].as_str().unwrap().len(), 64);
}
