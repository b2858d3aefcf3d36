//! Command-line pipeline for residualized temporal sparse autoencoders.
//!
//! Subcommands: synth, inspect, fit-ridge, train, eval, analyze, steer.
//! Logs go to stderr; data products go to files under the configured output
//! directory (inspect prints its JSON report to stdout when no file is
//! given). Every command writes a manifest with the content hashes of its
//! config, inputs, and outputs.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tsae_cli::commands;
use tsae_cli::config::RunConfig;
use tsae_cli::errors::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "tsae", version, about = "Residualized temporal SAE pipeline")]
struct Cli {
    /// Run configuration (TOML); required by every subcommand except inspect.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory (or the inspect report path).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the config worker-thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic trajectories and write the train/val pair.
    Synth,
    /// Summarize a .tsae file.
    Inspect {
        /// Trajectory file to inspect.
        path: PathBuf,
    },
    /// Fit the activation normalizer, ridge chain, and component normalizers.
    FitRidge,
    /// Train the configured SAE variant.
    Train,
    /// Teacher-forced reconstruction metrics on the validation split.
    Eval,
    /// Per-latent spatiotemporal feature analysis.
    Analyze,
    /// Build steering plans and optionally apply them to a trajectory file.
    Steer,
}

fn effective_config(cli: &Cli) -> CliResult<(RunConfig, Vec<u8>)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::config("--config is required for this subcommand"))?;
    let (mut config, _) = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        config.threads = threads;
    }
    config.validate()?;
    // hash the effective config (after overrides), not the file on disk
    let bytes = config.to_toml().into_bytes();
    Ok((config, bytes))
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Inspect { path } => commands::inspect::run(path, cli.out.as_deref()),
        Command::Synth => {
            let (config, bytes) = effective_config(cli)?;
            commands::synth::run(&config, &bytes)
        }
        Command::FitRidge => {
            let (config, bytes) = effective_config(cli)?;
            commands::fit_ridge::run(&config, &bytes)
        }
        Command::Train => {
            let (config, bytes) = effective_config(cli)?;
            commands::train::run(&config, &bytes)
        }
        Command::Eval => {
            let (config, bytes) = effective_config(cli)?;
            commands::eval::run(&config, &bytes)
        }
        Command::Analyze => {
            let (config, bytes) = effective_config(cli)?;
            commands::analyze::run(&config, &bytes)
        }
        Command::Steer => {
            let (config, bytes) = effective_config(cli)?;
            commands::steer::run(&config, &bytes)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
