//! `gsde`: config-driven certificates, exponent estimates, path simulation
//! and parameter sweeps.
//!
//! Exit codes: 0 success (certificate granted), 1 certificate withheld,
//! 2 configuration error, 3 computation error.

mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::config::{Config, Overrides};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("computation error: {0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "gsde", version, about = "Stability lab for SDEs driven by G-Brownian motion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a Lyapunov certificate on the grid.
    Certify(Args),
    /// Estimate tail Lyapunov exponents over a scenario family.
    Exponent(Args),
    /// Simulate paths under one scenario.
    Simulate(Args),
    /// Sweep one numeric parameter.
    Sweep(Args),
}

#[derive(Debug, clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `numerics.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<i32, CliError> {
    let (args, command): (&Args, fn(&Config, &Overrides) -> Result<i32, CliError>) = match &cli.command {
        Command::Certify(a) => (a, commands::certify),
        Command::Exponent(a) => (a, commands::exponent),
        Command::Simulate(a) => (a, commands::simulate),
        Command::Sweep(a) => (a, commands::sweep),
    };
    let text = fs::read_to_string(&args.config).map_err(|e| {
        CliError::Config(format!("cannot read {}: {e}", args.config.display()))
    })?;
    let config = Config::parse(&text)?;
    let overrides = Overrides {
        seed: args.seed,
        out: args.out.clone(),
    };
    command(&config, &overrides)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("gsde: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
