//! `edgegnn`: generate data, train, export, run and benchmark GNN
//! forecasting models.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use edgegnn::ir::ExecMode;
use edgegnn::models::ArchKind;
use edgegnn::pipeline::GapPolicy;

#[derive(Parser, Debug)]
#[command(name = "edgegnn", version, about = "Portable GNN runtime for multi-station PV forecasting")]
pub struct Cli {
    /// Machine-readable JSON on stdout instead of tables.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic multi-station PV dataset (CSV + capacity sidecar).
    GenData(GenDataArgs),
    /// Train a forecasting model and write a float64 checkpoint.
    Train(TrainArgs),
    /// Lower a checkpoint to an .egir model file.
    Export(ExportArgs),
    /// Run a model over a dataset and write predictions as CSV.
    Infer(InferArgs),
    /// Capacity-normalized error per station on a dataset split.
    Eval(EvalArgs),
    /// Compare Batched and Serialized execution of a model.
    VerifyEquivalence(VerifyArgs),
    /// Time inference over a dataset.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Station CSV: `timestamp,station_1,...,station_n`.
    #[arg(long)]
    pub data: PathBuf,
    /// Capacity sidecar JSON [default: the CSV path with extension `meta.json`].
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = GapArg::Reject)]
    pub gap_policy: GapArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum GapArg {
    Reject,
    ForwardFill,
}

impl From<GapArg> for GapPolicy {
    fn from(g: GapArg) -> Self {
        match g {
            GapArg::Reject => GapPolicy::Reject,
            GapArg::ForwardFill => GapPolicy::ForwardFill,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ArchArg {
    Gcn2,
    Sage2,
}

impl From<ArchArg> for ArchKind {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Gcn2 => ArchKind::Gcn2,
            ArchArg::Sage2 => ArchKind::Sage2,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Batched,
    Serialized,
}

impl From<ModeArg> for ExecMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Batched => ExecMode::Batched,
            ModeArg::Serialized => ExecMode::Serialized,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// The last 15% of samples in time order.
    Test,
    /// Every sample.
    All,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value_t = ModeArg::Batched)]
    pub mode: ModeArg,
    /// Concurrent inference sessions.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// Capacity sidecar path [default: the CSV path with extension `meta.json`].
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long, default_value_t = 150)]
    pub days: usize,
    /// Installed capacity per station in kW; the count sets the number of stations.
    #[arg(long, value_delimiter = ',', default_values_t = [5.0, 8.0, 10.0])]
    pub capacities: Vec<f64>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Draw each station's cloud cover independently.
    #[arg(long)]
    pub independent_weather: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = ArchArg::Gcn2)]
    pub arch: ArchArg,
    /// Input window in 15-minute steps.
    #[arg(long, default_value_t = 96)]
    pub k: usize,
    /// Forecast horizon in 15-minute steps.
    #[arg(long, default_value_t = 96)]
    pub h: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Early-stop patience in epochs (0 disables early stopping).
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Checkpoint output path (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// Also export the trained model to this .egir path.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Write the per-epoch JSON-lines report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output .egir path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Exported .egir model.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Predictions CSV (target timestamp, one column per station, kW).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Exported .egir model.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    /// Exported .egir model.
    #[arg(long)]
    pub model: PathBuf,
    /// Feed windows from this dataset.
    #[arg(long, conflicts_with = "batch")]
    pub data: Option<PathBuf>,
    /// Capacity sidecar JSON [default: the CSV path with extension `meta.json`].
    #[arg(long, requires = "data")]
    pub metadata: Option<PathBuf>,
    /// Feed this many random samples instead of a dataset.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum accepted absolute divergence.
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    /// Concurrent per-sample evaluation in Serialized mode.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Exported .egir model.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Keep only the last N samples of the split.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,
    /// Also write the report JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            failure.exit_code()
        }
    }
}
