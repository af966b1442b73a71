//! Command implementations behind the `ouexec` binary.
//!
//! Every command first records what it will do in a [`RunManifest`] and then
//! executes the manifest, so `rerun` can replay any run from the manifest
//! file alone.

mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ouexec::Error;

pub use commands::execute;
pub use manifest::{Command, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "ouexec", version, about = "Optimal execution and statistical arbitrage under OU prices")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Fit OU parameters, the Bachelier covariance and the Johansen test to a price CSV.
    Estimate(EstimateArgs),
    /// Solve the coefficient equations and certify the solution.
    Solve(SolveArgs),
    /// Roll a strategy along one price path.
    Schedule(ScheduleArgs),
    /// Simulate many paths and summarize the PnL distribution.
    Montecarlo(MonteCarloArgs),
    /// Merton positions and value coefficients.
    Merton(MertonArgs),
    /// Replay a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Price CSV with header `time,<name1>,...`.
    #[arg(long)]
    pub prices: PathBuf,
    /// Replace the time column by `row / bars_per_day` trading days.
    #[arg(long)]
    pub bars_per_day: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// OU parameters (JSON).
    #[arg(long)]
    pub params: PathBuf,
    /// Execution spec (JSON).
    #[arg(long)]
    pub exec: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Liquidation)]
    pub mode: ModeArg,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Liquidation,
    Statarb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Optimal,
    Ac,
    Merton,
    Twap,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    /// Riccati grid steps.
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct StrategyArgs {
    #[arg(long, value_enum, default_value_t = KindArg::Optimal)]
    pub strategy: KindArg,
    /// Multiply the control by this factor.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Full strategy configuration (JSON); overrides --strategy and --scale.
    #[arg(long)]
    pub strategy_file: Option<PathBuf>,
    /// Cap on the Merton tracking rate (shares/day).
    #[arg(long)]
    pub max_rate: Option<f64>,
    /// Initial inventory, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub q0: Option<Vec<f64>>,
    /// Initial price for simulated paths, comma separated; defaults to Sbar.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub s0: Option<Vec<f64>>,
    /// Riccati grid steps when no solution file is given.
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// Riccati solution CSV written by `solve`.
    #[arg(long)]
    pub solution: Option<PathBuf>,
    /// Covariance of the Brownian benchmark (JSON rows) for --strategy ac.
    #[arg(long)]
    pub sigma_ac: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    /// Price CSV to trade along; spans [0, T] in days.
    #[arg(long, conflicts_with = "simulate")]
    pub prices: Option<PathBuf>,
    /// Replace the price file's time column by `row / bars_per_day`.
    #[arg(long, requires = "prices")]
    pub bars_per_day: Option<f64>,
    /// Trade along a simulated path instead.
    #[arg(long)]
    pub simulate: bool,
    /// Bars on the simulated path.
    #[arg(long, default_value_t = 840)]
    pub bars: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct MonteCarloArgs {
    #[command(flatten)]
    pub spec: SpecArgs,
    #[command(flatten)]
    pub strategy: StrategyArgs,
    #[arg(long, default_value_t = 1500)]
    pub paths: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Bars per simulated path.
    #[arg(long, default_value_t = 840)]
    pub bars: usize,
    #[arg(long, default_value_t = 60)]
    pub bins: usize,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MertonArgs {
    #[arg(long)]
    pub params: PathBuf,
    /// Execution spec supplying gamma and T.
    #[arg(long)]
    pub exec: PathBuf,
    /// Price CSV; positions are reported along it.
    #[arg(long)]
    pub prices: Option<PathBuf>,
    #[arg(long, requires = "prices")]
    pub bars_per_day: Option<f64>,
    /// Fixed price for a time grid of --steps intervals when no prices are given.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub s0: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    /// manifest.json written by an earlier run.
    pub manifest: PathBuf,
    /// Output directory; defaults to the one recorded in the manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Exit status for an error: 2 invalid input, 3 numerical failure, 4 I/O or
/// unreadable input files.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Range(..) => 2,
        Error::Numerical(_) => 3,
        Error::Io(_) | Error::Parse(_) => 4,
    }
}

/// Parses nothing; runs an already parsed command line.
pub fn run(cli: Cli) -> ouexec::Result<RunManifest> {
    let manifest = match cli.command {
        Cmd::Rerun(a) => {
            let mut m = manifest::read(&a.manifest)?;
            if let Some(out) = a.out {
                m.out_dir = out.to_string_lossy().into_owned();
            }
            m
        }
        other => manifest::from_command(other)?,
    };
    execute(&manifest)?;
    Ok(manifest)
}
