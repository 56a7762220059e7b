//! `duallink`: configuration-driven runs of the primal, dual and coupled
//! simulations, the verification suites and the posterior region sampler.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric failure,
//! 4 statistical or invariant check failed, 5 file I/O error.

mod commands;
mod config;
mod flat;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{create_run_dir, CliError};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "duallink", version, about = "Dual and coupled simulation of drifting Brownian motions")]
struct Cli {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    replicas: Option<usize>,
    /// Output root for run directories.
    #[arg(long, global = true, env = "DUALLINK_OUT")]
    out: Option<PathBuf>,
    /// Replace one config value, e.g. `grid.steps=500`. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Primal Euler paths to paths.csv.
    Simulate,
    /// Liggett dual paths to dual.jsonl.
    Dual,
    /// Lambda-linked coupling trajectories, one JSONL file per replica.
    Couple,
    /// Entrance couplings against the 2M - W construction.
    Pitman,
    /// Verification suites; fails when any report fails.
    Verify,
    /// Region sampler on a logistic posterior with an oracle comparison.
    Posterior,
    /// Converts the JSONL artifacts of a run directory to CSV.
    Plot { run_dir: PathBuf },
    /// Prints the resolved config and exits.
    Config,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Dual => "dual",
            Command::Couple => "couple",
            Command::Pitman => "pitman",
            Command::Verify => "verify",
            Command::Posterior => "posterior",
            Command::Plot { .. } => "plot",
            Command::Config => "config",
        }
    }
}

const DEFAULT_OUT: &str = "runs";

fn run(cli: Cli) -> Result<bool, CliError> {
    let mut overrides = Vec::new();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(r) = cli.replicas {
        overrides.push(format!("replicas={r}"));
    }
    overrides.extend(cli.overrides);
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    let root = cli.out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    cfg.out = Some(root.clone());
    if matches!(cli.command, Command::Verify) {
        commands::resolve_verify(&mut cfg);
    }
    if let Command::Config = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(true);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| CliError::Io(e.into()))?;

    let dir = create_run_dir(&root, cli.command.name())?;
    commands::prepare(&dir, &cfg)?;
    let outcome = match &cli.command {
        Command::Simulate => commands::simulate(&cfg, &dir),
        Command::Dual => commands::dual(&cfg, &dir),
        Command::Couple => commands::couple(&cfg, &dir),
        Command::Pitman => commands::pitman(&cfg, &dir),
        Command::Verify => commands::verify(&cfg, &dir),
        Command::Posterior => commands::posterior(&cfg, &dir),
        Command::Plot { run_dir } => commands::plot(run_dir, &dir),
        Command::Config => unreachable!("handled above"),
    }?;
    println!("run directory: {}", outcome.run_dir.display());
    println!("{}", outcome.summary.trim_end());
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("duallink: a check failed");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("duallink: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
