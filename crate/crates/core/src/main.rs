use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use afarepart::cli::{cmd_compare, cmd_enumerate, cmd_gen_toy, cmd_optimize, cmd_simulate, cmd_sweep, exit_code};
use afarepart::config::RunConfig;

/// Fault-aware DNN layer-to-device partitioning.
#[derive(Debug, Parser)]
#[command(name = "afarepart", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed for optimization and fault draws.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Dotted-path override such as `optimizer.population=20`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run NSGA-II and pick a deployment from the front.
    Optimize,
    /// Score every partition and write the exact front.
    Enumerate,
    /// Seed-averaged accuracy of both methods across fault rates.
    Sweep {
        /// Comma-separated fault rates.
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
    },
    /// Fault-aware versus fault-unaware across fault scenarios.
    Compare,
    /// Replay a runtime scenario with threshold-triggered re-optimization.
    Simulate {
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Write a toy model, dataset, profiles and config to disk.
    GenToy {
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        toy_seed: Option<u64>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    match &cli.command {
        Command::Sweep { rates: Some(r) } => {
            let list: Vec<String> = r.iter().map(f64::to_string).collect();
            overrides.push(format!("experiment.sweep_rates=[{}]", list.join(",")));
        }
        Command::Simulate { scenario: Some(p) } => {
            let p = std::path::absolute(p).unwrap_or_else(|_| p.clone());
            overrides.push(format!("scenario={:?}", p.display().to_string()));
        }
        Command::GenToy { arch, toy_seed } => {
            if let Some(a) = arch {
                overrides.push(format!("model.toy={a:?}"));
            }
            if let Some(s) = toy_seed {
                overrides.push(format!("model.toy_seed={s}"));
            }
        }
        _ => {}
    }
    let result = RunConfig::load(cli.config.as_deref(), &overrides).and_then(|cfg| match cli.command {
        Command::Optimize => cmd_optimize(&cfg, &cli.out),
        Command::Enumerate => cmd_enumerate(&cfg, &cli.out),
        Command::Sweep { .. } => cmd_sweep(&cfg, &cli.out),
        Command::Compare => cmd_compare(&cfg, &cli.out),
        Command::Simulate { .. } => cmd_simulate(&cfg, &cli.out),
        Command::GenToy { .. } => cmd_gen_toy(&cfg, &cli.out),
    });
    match result {
        Ok(out) => {
            println!("{}", out.summary.trim_end());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
