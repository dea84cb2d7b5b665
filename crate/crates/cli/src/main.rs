//! `extctl`: estimation, design, simulation and overlap sweeps driven by a
//! JSON run config.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config error, 3 infeasible design.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde_json::Value;
use sha2::{Digest, Sha256};

use config::{Command, RunConfig};
use error::{CliError, CliResult};
use output::{OutputDir, RunHeader};

#[derive(Debug, Parser)]
#[command(name = "extctl", version, about = "External-control analyses from a JSON run config")]
struct Args {
    /// Run config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; overrides `threads` in the config.
    #[arg(long)]
    threads: Option<usize>,
    /// Master seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn command_block(cfg: &RunConfig) -> CliResult<Value> {
    Ok(match cfg.command {
        Command::Estimate => serde_json::to_value(&cfg.estimate)?,
        Command::Design => serde_json::to_value(&cfg.design)?,
        Command::Simulate => serde_json::to_value(&cfg.simulate)?,
        Command::Sweep => serde_json::to_value(&cfg.sweep)?,
    })
}

fn run(args: &Args) -> CliResult<PathBuf> {
    let bytes = std::fs::read(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let text = std::str::from_utf8(&bytes).map_err(|_| CliError::Config("config is not UTF-8".into()))?;
    let cfg = config::parse(text)?;
    cfg.validate()?;

    let seed = args.seed.unwrap_or(cfg.seed);
    let out_dir = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(|p| config::resolve(&args.config, p)))
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `output_dir`".into()))?;
    if let Some(n) = args.threads.or(cfg.threads) {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure {n} threads: {e}")))?;
    }

    let header = RunHeader {
        command: cfg.command.name(),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config_sha256: format!("{:x}", Sha256::digest(&bytes)),
        config: command_block(&cfg)?,
    };
    log::info!("{} run, seed {seed}, config sha256 {}", header.command, header.config_sha256);

    let mut out = OutputDir::create(&out_dir)?;
    let mut infeasible = None;
    let results = match cfg.command {
        Command::Estimate => {
            commands::estimate_cmd(cfg.estimate.as_ref().expect("validated"), &args.config, seed, &mut out)?
        }
        Command::Design => {
            let (results, flag) =
                commands::design_cmd(cfg.design.as_ref().expect("validated"), &args.config, seed, &mut out)?;
            infeasible = flag;
            results
        }
        Command::Simulate => commands::simulate_cmd(cfg.simulate.as_ref().expect("validated"), seed, &mut out)?,
        Command::Sweep => commands::sweep_cmd(cfg.sweep.as_ref().expect("validated"), seed, &mut out)?,
    };
    let report = out.finish(header, results)?;
    match infeasible {
        Some(reason) => Err(CliError::Infeasible(reason)),
        None => Ok(report),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    match run(&args) {
        Ok(report) => {
            log::info!("wrote {}", report.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("extctl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
