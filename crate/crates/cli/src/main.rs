//! `pwl`: generate data, train point-wise-loss models, evaluate them and
//! export figure data.
//!
//! Exit codes: 0 success, 2 validation error, 3 numeric divergence, 4 I/O error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::MonotoneArg;

#[derive(Debug, Parser)]
#[command(
    name = "pwl",
    version,
    about = "Monotone neural networks via a point-wise gradient penalty"
)]
struct Cli {
    /// `key = value` settings file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Require reproducible execution. Every command already runs
    /// single-threaded with seeded generators, so this only records intent.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sample the synthetic sin(x) + e^y regression task.
    Generate(GenerateArgs),
    /// Encode the UCI Adult files into train, held-out and test CSVs.
    PrepareAdult(PrepareAdultArgs),
    /// Train a model on a dataset CSV.
    Train(TrainArgs),
    /// Score a model on a dataset CSV and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Model output on a regular grid over [0,1]^2.
    ExportContour(ContourArgs),
    /// Conditioned trend curves for one feature.
    ExportTrends(TrendsArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Standard deviation of Gaussian label noise.
    #[arg(long)]
    pub noise: Option<f64>,
    /// Output CSV path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareAdultArgs {
    /// Directory holding `adult.data` and `adult.test`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// `category` keeps `?` as its own value; `drop` removes those rows.
    #[arg(long)]
    pub missing: Option<String>,
    /// Fraction of `adult.data` used for training.
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for train.csv, held_out.csv and test.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training dataset CSV.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Constrained feature as `index:dir` or `name:dir`, dir `+` or `-`.
    #[arg(long = "monotone")]
    pub monotone: Vec<MonotoneArg>,
    /// Ignore monotone features and train on the empirical risk alone.
    #[arg(long)]
    pub plain: bool,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Vec<usize>,
    /// Hidden activation: tanh, softplus or relu.
    #[arg(long)]
    pub activation: Option<String>,
    /// Initialization: uniform_glorot or normal_scaled.
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub penalty_weight: Option<f64>,
    /// Alternate loss terms: this many empirical-risk minibatches per phase.
    #[arg(long)]
    pub switch_frequency: Option<usize>,
    /// Minibatches per penalty phase (defaults to --switch-frequency).
    #[arg(long)]
    pub penalty_frequency: Option<usize>,
    /// Keep the dataset order instead of reshuffling every epoch.
    #[arg(long)]
    pub no_shuffle: bool,
    /// Training points used for the per-epoch M_k log.
    #[arg(long)]
    pub probe_size: Option<usize>,
    /// Sweep resolution of the per-epoch M_k log.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Seeds both initialization and batch order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output model path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training log CSV (defaults to the model path with a `.log.csv` suffix).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset CSV to evaluate on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long = "monotone")]
    pub monotone: Vec<MonotoneArg>,
    /// Dataset whose feature ranges define the sweeps (defaults to --data).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Also write `mk.csv` and `delta_<feature>.csv` into this directory.
    #[arg(long)]
    pub csv_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path (JSON); printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ContourArgs {
    /// Model to evaluate; mutually exclusive with --target.
    #[arg(long, conflicts_with = "target")]
    pub model: Option<PathBuf>,
    /// Export the analytic sin(x) + e^y surface instead of a model.
    #[arg(long)]
    pub target: bool,
    /// Points per axis.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrendsArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Dataset the anchors are drawn from.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Swept feature, by index or name.
    #[arg(long)]
    pub feature: Option<String>,
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Dataset whose feature range defines the sweep (defaults to --data).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if cli.deterministic {
        log::info!("deterministic mode: single-threaded, seeded execution");
    }
    let result =
        config::FileConfig::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
            Command::Generate(a) => commands::generate(&a, &cfg),
            Command::PrepareAdult(a) => commands::prepare_adult(&a, &cfg),
            Command::Train(a) => commands::train(&a, &cfg),
            Command::Evaluate(a) => commands::evaluate(&a, &cfg),
            Command::ExportContour(a) => commands::export_contour(&a, &cfg),
            Command::ExportTrends(a) => commands::export_trends(&a, &cfg),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
