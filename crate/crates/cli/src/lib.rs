//! Experiment driver for `hedgelab`: simulate, ingest, train, evaluate and
//! compare hedging policies, writing plot-ready CSV/JSON plus a manifest.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod seeds;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, Overrides};
use crate::manifest::RunManifest;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "HEDGE_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hedge-lab", version, about = "Deep hedging experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate GBM paths to paths.csv.
    Simulate(Common),
    /// Train the configured mode; writes checkpoint.json and training_curve.csv.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate on fresh test paths at every test sigma.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Trained network; not needed for bs_delta.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every mode over the cost/sigma/epoch grid.
    Compare(Common),
    /// Turn an order-book CSV into WAP paths and a realized volatility.
    Ingest {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// Flat TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub cost: Option<f64>,
    /// Training volatility.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub strike: Option<f64>,
    #[arg(long)]
    pub budget_bytes: Option<u64>,
}

impl Common {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        config.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            mode: self.mode.clone(),
            paths: self.paths,
            epochs: self.epochs,
            cost: self.cost,
            sigma: self.sigma,
            strike: self.strike,
            budget_bytes: self.budget_bytes,
        });
        config.validate()?;
        Ok(config)
    }
}

pub fn run(cli: &Cli) -> Result<RunManifest> {
    match &cli.command {
        Command::Simulate(c) => commands::simulate(&c.resolve()?),
        Command::Train { common, resume } => commands::train(&common.resolve()?, resume.as_deref()),
        Command::Evaluate { common, checkpoint } => commands::evaluate(&common.resolve()?, checkpoint.as_deref()),
        Command::Compare(c) => commands::compare(&c.resolve()?),
        Command::Ingest { common, input } => commands::ingest(&common.resolve()?, input),
    }
}

/// Sizes the global rayon pool from `HEDGE_LAB_THREADS`, if set.
pub fn init_thread_pool() -> Result<()> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    anyhow::ensure!(threads >= 1, "{THREADS_ENV} must be >= 1");
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}
