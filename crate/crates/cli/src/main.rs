//! `gbsde`: batch experiments for G-expectations and reflected FBSDEs.
//!
//! Exit status: 0 success, 1 I/O failure, 2 configuration error, 3 invariant or
//! audit failure, 4 numerical abort.

mod commands;
mod config;
mod expr;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gbsde_core::Category;
use thiserror::Error;

use commands::{Artifacts, Experiment};
use config::{Backend, ExperimentConfig, Overrides};
use manifest::Manifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] gbsde_core::Error),
    #[error("audit failed: {0}")]
    Audit(String),
    #[error("{0}")]
    NotConverged(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => category_code(e.category()),
            CliError::Audit(_) => 3,
            CliError::NotConverged(_) => 4,
        }
    }
}

fn category_code(c: Category) -> u8 {
    match c {
        Category::Config => 2,
        Category::Invariant => 3,
        Category::Numerical => 4,
    }
}

#[derive(Debug, Parser)]
#[command(name = "gbsde", version, about = "G-expectation and reflected FBSDE experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment file (for `audit`: a run manifest).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the scenario streams.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Convergence tolerance for the ladders and the coupled iteration.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Number of time steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Bang-bang family depth.
    #[arg(long, global = true)]
    family_depth: Option<usize>,
    #[arg(long, global = true, value_enum)]
    backend: Option<Backend>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            tol: self.tol,
            steps: self.steps,
            family_depth: self.family_depth,
            backend: self.backend,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the G-heat equation on the lattice.
    Gheat,
    /// Simulate B and its quadratic variation under a bang-bang family.
    Paths,
    /// Tabulate and audit an inf-convolution ladder.
    Infconv,
    /// Solve the forward equation through the monotone ladder.
    Forward,
    /// Solve a reflected backward equation.
    Rbsde,
    /// Run the coupled monotone iteration.
    Rfbsde,
    /// Replay a manifest and compare artifact digests.
    Audit,
}

impl Command {
    fn experiment(&self) -> Option<Experiment> {
        Some(match self {
            Command::Gheat => Experiment::Gheat,
            Command::Paths => Experiment::Paths,
            Command::Infconv => Experiment::Infconv,
            Command::Forward => Experiment::Forward,
            Command::Rbsde => Experiment::Rbsde,
            Command::Rfbsde => Experiment::Rfbsde,
            Command::Audit => return None,
        })
    }
}

fn write_run(dir: &Path, artifacts: &Artifacts, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, bytes) in &artifacts.files {
        let path = dir.join(name);
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    let path = dir.join(manifest::FILE_NAME);
    std::fs::write(&path, manifest.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn print_report(artifacts: &Artifacts) {
    if let Some((_, bytes)) = artifacts.files.iter().find(|(n, _)| n == "report.txt") {
        print!("{}", String::from_utf8_lossy(bytes));
    }
}

fn run(cli: &Cli) -> Result<()> {
    let out = cli.common.out.clone();
    match cli.command.experiment() {
        Some(experiment) => {
            let mut cfg = ExperimentConfig::load(cli.common.config.as_deref())?;
            cfg.apply(&cli.common.overrides());
            let outcome = commands::run(experiment, &cfg)?;
            let manifest = Manifest::new(experiment, &cfg, &outcome.artifacts);
            let dir = out.unwrap_or_else(|| PathBuf::from("out"));
            write_run(&dir, &outcome.artifacts, &manifest)?;
            print_report(&outcome.artifacts);
            println!("artifacts: {}", dir.display());
            match outcome.failure {
                Some(e) => Err(e.into()),
                None => Ok(()),
            }
        }
        None => {
            let path = cli
                .common
                .config
                .as_deref()
                .ok_or_else(|| CliError::Config("audit needs --config <manifest.toml>".into()))?;
            let o = cli.common.overrides();
            if o.seed.is_some()
                || o.tol.is_some()
                || o.steps.is_some()
                || o.family_depth.is_some()
                || o.backend.is_some()
            {
                return Err(
                    CliError::Config("audit replays the manifest as recorded; drop the overrides".into()).into(),
                );
            }
            let recorded = Manifest::load(path)?;
            let outcome = commands::run(recorded.subcommand, &recorded.config)?;
            if let Some(dir) = &out {
                let fresh = Manifest::new(recorded.subcommand, &recorded.config, &outcome.artifacts);
                write_run(dir, &outcome.artifacts, &fresh)?;
            }
            let bad = recorded.mismatches(&outcome.artifacts);
            for name in recorded.artifacts.keys() {
                let status = if bad.contains(name) { "mismatch" } else { "ok" };
                println!("{status}: {name}");
            }
            if bad.is_empty() {
                println!("audit: {} artifacts identical", recorded.artifacts.len());
                Ok(())
            } else {
                Err(CliError::Audit(format!("artifacts differ: {}", bad.join(", "))).into())
            }
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| {
            e.downcast_ref::<CliError>().map(CliError::exit_code).or_else(|| {
                e.downcast_ref::<gbsde_core::Error>()
                    .map(|c| category_code(c.category()))
            })
        })
        .unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
