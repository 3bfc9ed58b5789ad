//! `pdeforecast`: generate data, train derivative-equation models,
//! forecast, print discovered equations and evaluate.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pdeforecast::Error;

use crate::config::RunArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] Error),
    #[error("{path}: {source}")]
    File { path: String, source: Error },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
}

impl CliError {
    pub fn file(path: &std::path::Path) -> impl FnOnce(Error) -> CliError + '_ {
        move |source| CliError::File { path: path.display().to_string(), source }
    }

    /// 2 for bad input, 3 for numerical failure, 4 for bad configuration.
    pub fn exit_code(&self) -> u8 {
        let core = match self {
            CliError::Config(_) => return 4,
            CliError::Input(_) => return 2,
            CliError::Core(e) | CliError::File { source: e, .. } => e.root(),
        };
        match core {
            Error::Config(_) | Error::Plan { .. } | Error::Weight(_) | Error::UnsupportedOrder(_) => 4,
            Error::Numeric(_) | Error::Divergence { .. } | Error::DegenerateMetric | Error::TrainingData(_) => 3,
            _ => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "pdeforecast", version, about = "Forecasting with sparse, readable derivative equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic series as CSV.
    Generate(GenerateArgs),
    /// Train a single block, a hybrid, a meta-controlled hybrid or a grid
    /// search.
    Train(TrainArgs),
    /// Forecast from a trained model.
    Predict(PredictArgs),
    /// Print the discovered equation.
    Discover(DiscoverArgs),
    /// Score a model on the test split, or run the three-way ablation.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output CSV path.
    #[arg(long)]
    pub out: std::path::PathBuf,
    /// `wave` or `regime`.
    #[arg(long, default_value = "wave")]
    pub kind: String,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub t_min: Option<f64>,
    #[arg(long)]
    pub t_max: Option<f64>,
    #[arg(long)]
    pub k_max: Option<usize>,
    /// Gaussian noise standard deviation on the target.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
#[group(id = "kind", multiple = false)]
pub struct TrainKind {
    #[arg(long, group = "kind")]
    pub single: bool,
    #[arg(long, group = "kind")]
    pub hybrid: bool,
    #[arg(long, group = "kind")]
    pub meta: bool,
    /// Search learning rate and sparsity for a single block.
    #[arg(long, group = "kind")]
    pub grid: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: std::path::PathBuf,
    /// Directory for `model.json` and `report.json`.
    #[arg(long)]
    pub out_dir: std::path::PathBuf,
    #[command(flatten)]
    pub kind: TrainKind,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: std::path::PathBuf,
    #[arg(long)]
    pub data: std::path::PathBuf,
    /// Last history row; defaults to the final row.
    #[arg(long)]
    pub anchor: Option<usize>,
    /// Forecast CSV; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct DiscoverArgs {
    #[arg(long)]
    pub model: std::path::PathBuf,
    #[arg(long)]
    pub data: std::path::PathBuf,
    #[arg(long, conflicts_with = "latex")]
    pub ascii: bool,
    #[arg(long)]
    pub latex: bool,
    #[arg(long, default_value_t = 2)]
    pub precision: usize,
    #[arg(long, default_value_t = pdeforecast::render::DEFAULT_TRUNCATION)]
    pub truncation: usize,
    /// Equation document JSON.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Trained model; not needed with `--ablate`.
    #[arg(long, required_unless_present = "ablate")]
    pub model: Option<std::path::PathBuf>,
    #[arg(long)]
    pub data: std::path::PathBuf,
    /// Compare the single block against fixed and meta-selected hybrids.
    #[arg(long)]
    pub ablate: bool,
    /// Report JSON.
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PDEFORECAST_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Discover(a) => commands::discover(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
