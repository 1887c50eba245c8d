//! `multishot` command-line driver: simulate, optimize, train, evaluate,
//! summarize and compare.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use multishot::error::ErrorClass;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError { code: EXIT_DATA, message: message.into() }
    }
}

impl From<multishot::Error> for CliError {
    fn from(e: multishot::Error) -> Self {
        let code = match e.class() {
            ErrorClass::Usage => EXIT_USAGE,
            ErrorClass::Data => EXIT_DATA,
            ErrorClass::Numerical => EXIT_NUMERICAL,
        };
        CliError { code, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "multishot", version, about = "Multi-shot body recovery pipeline on synthetic data")]
pub struct Cli {
    /// Worker threads; 1 runs everything sequentially. Outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    pub jobs: usize,

    /// Seed overriding the one in the configuration file.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-shot dataset.
    Simulate(SimulateArgs),
    /// Fit every sequence of a dataset.
    Optimize(OptimizeArgs),
    /// Train a regressor on pseudo ground truth.
    Train(TrainArgs),
    /// Score estimates against a dataset.
    Eval(EvalArgs),
    /// Tracklet statistics per assembly mode.
    Stats(StatsArgs),
    /// Paired comparison of two report CSVs.
    Compare(CompareArgs),
    /// Run the seeded comparison protocols and write the report tables.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// TOML generator configuration; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    SingleFrame,
    SingleShot,
    MultiShot,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// TOML solver configuration; its `mode` is replaced by `--mode`.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    SingleFrame,
    Transformer,
    Conv,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub pseudo_gt: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Weights to start from, e.g. a pretrained single-frame model.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Loss curve CSV; defaults to the weights path with `.loss.csv`.
    #[arg(long)]
    pub loss_curve: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Pck,
    CrossShotPck,
    Mpjpe,
    PaMpjpe,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Estimates JSON from `optimize`.
    #[arg(long, required_unless_present = "weights", conflicts_with = "weights")]
    pub estimates: Option<PathBuf>,
    /// Regressor weights from `train`; predictions are scored instead.
    #[arg(long)]
    pub weights: Option<PathBuf>,
    /// Prediction window for `--weights`.
    #[arg(long, default_value_t = 16)]
    pub window: usize,
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    pub alphas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrackletArg {
    SingleShot,
    ContinuousIdentity,
    MultiShot,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// All three modes when omitted.
    #[arg(long, value_enum)]
    pub mode: Option<TrackletArg>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub report_a: PathBuf,
    #[arg(long)]
    pub report_b: PathBuf,
    /// Value column; the second column when omitted.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Modes,
    Encoders,
    All,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// TOML file with optional `[modes]` and `[encoders]` tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "all")]
    pub protocol: ProtocolArg,
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
