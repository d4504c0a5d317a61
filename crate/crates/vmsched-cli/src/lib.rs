//! Command-line frontend: trace generation, training, evaluation, policy
//! comparison, and ablation sweeps. Binary output lives under an `--out`
//! directory; every run writes a `manifest.json` with its fully resolved
//! configuration (and nothing volatile), so reruns are reproducible and
//! identical settings produce identical artifacts.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("policy {policy:?} needs --checkpoint")]
    MissingCheckpoint { policy: String },
    #[error("unknown policy {name:?}")]
    UnknownPolicy { name: String },
    #[error("unknown ablation variant {name:?}")]
    UnknownAblation { name: String },
    #[error("unknown scenario mode {name:?} (use non_expansion or expansion)")]
    UnknownMode { name: String },
}

/// Reads `VMSCHED_LOG_LEVEL` (e.g. `info`, `debug`); defaults to warnings.
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("VMSCHED_LOG_LEVEL", "warn");
    let _ = env_logger::Builder::from_env(env)
        .format_timestamp(None)
        .try_init();
}

#[derive(Debug, Parser)]
#[command(name = "vmsched", version, about = "Cluster VM scheduling workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic request trace file.
    GenTrace(GenTraceArgs),
    /// Train a scheduler and write logs plus checkpoints.
    Train(TrainArgs),
    /// Evaluate one policy on freshly generated traces.
    Eval(EvalArgs),
    /// Sweep policies across warm-start levels into one table.
    Compare(CompareArgs),
    /// Train ablation variants and write their learning curves.
    Ablate(AblateArgs),
}

/// Overrides shared by every subcommand; unset flags fall back to the
/// config file, then to built-in defaults.
#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Experiment TOML; omit to use built-in defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Initial fleet size override.
    #[arg(long)]
    pub pms: Option<usize>,
    /// Warm-start CPU utilization in [0, 1).
    #[arg(long)]
    pub warm_start: Option<f64>,
    /// Scenario mode: non_expansion or expansion.
    #[arg(long)]
    pub mode: Option<String>,
    /// Creates per generated trace.
    #[arg(long)]
    pub trace_length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenTraceArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trace file to write (a .meta.json sidecar is written next to it).
    #[arg(long)]
    pub out: PathBuf,
    /// Number of create requests.
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory (manifest, train_log.csv, checkpoint.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Scheduler to train: cvd_rl (default) or flat_dqn.
    #[arg(long)]
    pub policy: Option<String>,
    /// Epoch count override.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Resume from a checkpoint file; its embedded config wins.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint cadence override (epochs).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory (manifest, summary.json).
    #[arg(long)]
    pub out: PathBuf,
    /// Policy name: first_fit, best_fit, surrogate, random, cvd_rl, flat_dqn.
    #[arg(long)]
    pub policy: String,
    /// Checkpoint file; required for cvd_rl and flat_dqn.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation traces.
    #[arg(long)]
    pub traces: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory (manifest, table.csv).
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated policy list; defaults to the config's.
    #[arg(long)]
    pub policies: Option<String>,
    /// Checkpoint for a learned policy, as name=path; repeatable.
    #[arg(long = "checkpoint")]
    pub checkpoints: Vec<String>,
    /// Evaluation traces per grid cell.
    #[arg(long)]
    pub traces: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory; one subdirectory per variant.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated variants; defaults to the full set.
    #[arg(long)]
    pub variants: Option<String>,
    /// Independent training seeds per variant.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Epoch count override.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Moving-average window for curve.csv.
    #[arg(long, default_value_t = 10)]
    pub window: usize,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenTrace(args) => commands::gen_trace(args),
        Command::Train(args) => commands::train(args).map(|_| ()),
        Command::Eval(args) => commands::eval(args).map(|_| ()),
        Command::Compare(args) => commands::compare(args).map(|_| ()),
        Command::Ablate(args) => commands::ablate(args),
    }
}
