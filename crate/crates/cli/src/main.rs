//! `caps`: configuration-driven runs of the CAPS pipeline.
//!
//! Exit codes: 0 success, 1 verification violation, 2 config schema
//! error, 3 missing input, 4 internal invariant breach.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "caps", version, about = "Constraint-adaptive policy switching for offline safe RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the dataset, training and fuzzing seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to the config value, then to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Build an environment and write it as JSON.
    EnvGen,
    /// Generate an offline dataset.
    DatasetGen,
    /// Train a K-head CAPS artifact.
    Train,
    /// Evaluate an artifact over a threshold set.
    Eval,
    /// Count safe tasks per threshold set.
    Sweep,
    /// Run head, sharing, FQE or threshold ablations.
    Ablate,
    /// Fuzz the cost bound of exact CAPS.
    Verify,
}

fn run(cli: &Cli) -> CliResult<String> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(n) = cli.workers.or(cfg.workers) {
        if n == 0 {
            return Err(CliError::Schema("workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Invariant(e.to_string()))?;
    }
    let out = cli.out.as_path();
    match cli.command {
        Command::EnvGen => commands::env_gen(&cfg, out),
        Command::DatasetGen => commands::dataset_gen(&cfg, out),
        Command::Train => commands::train_cmd(&cfg, out),
        Command::Eval => commands::eval_cmd(&cfg, out),
        Command::Sweep => commands::sweep_cmd(&cfg, out),
        Command::Ablate => commands::ablate_cmd(&cfg, out),
        Command::Verify => commands::verify_cmd(&cfg, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CAPS_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
