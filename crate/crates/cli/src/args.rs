use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dfab_core::TaskKind;

#[derive(Debug, Parser)]
#[command(name = "dfab", version, about = "Train and apply piecewise sparse linear models")]
pub struct Cli {
    /// Log verbosity: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn", env = "DFAB_LOG")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its ground-truth model.
    Synth(SynthArgs),
    /// Train a model and write the model, a per-iteration report and a run manifest.
    Train(TrainArgs),
    /// Write one prediction per row of a dataset.
    Predict(PredictArgs),
    /// Print the test error and per-expert assignment counts.
    Evaluate(EvaluateArgs),
    /// Print a model as threshold rules and sparse linear formulas.
    Inspect(InspectArgs),
    /// Serve a remote coordinator as one socket worker.
    Worker(WorkerArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Regression,
    Classification,
}

impl From<Task> for TaskKind {
    fn from(t: Task) -> Self {
        match t {
            Task::Regression => TaskKind::Regression,
            Task::Classification => TaskKind::Classification,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransportArg {
    /// Workers run in place on the coordinator thread.
    Direct,
    /// One thread per worker.
    Threads,
    /// Separate `dfab worker` processes connecting over TCP.
    Socket,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output prefix; writes `<out>.csv` and `<out>.truth.toml`.
    #[arg(long, default_value = "synth")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    /// Number of features.
    #[arg(long, default_value_t = 100)]
    pub d: usize,
    /// Depth of the generating tree.
    #[arg(long, default_value_t = 3)]
    pub depth: u32,
    #[arg(long, default_value_t = 5)]
    pub experts: usize,
    #[arg(long, default_value_t = 10)]
    pub nonzero_min: usize,
    #[arg(long, default_value_t = 20)]
    pub nonzero_max: usize,
    /// Noise variance of the targets.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Read `--noise` as a standard deviation.
    #[arg(long)]
    pub noise_std: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Name of the target column.
    #[arg(long, default_value = "y")]
    pub target: String,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Headed CSV file; relative paths resolve against DFAB_DATA_DIR when set.
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the target column.
    #[arg(long, default_value = "y")]
    pub target: String,
    #[arg(long, value_enum, default_value = "regression")]
    pub task: Task,
    /// Fraction of rows held out for evaluation (0 keeps every row).
    #[arg(long, default_value_t = 0.0)]
    pub holdout: f64,
    /// Seeds the holdout shuffle; defaults to `--seed`.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Directory for the model, report, manifest and checkpoints.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Depth of the initial complete tree.
    #[arg(long, default_value_t = 3)]
    pub depth: u32,
    /// Equal-width bins per feature; their interior edges are the split candidates.
    #[arg(long, default_value_t = 64)]
    pub tmax: usize,
    /// Shrinkage threshold in samples; defaults to 1% of the training rows.
    #[arg(long)]
    pub eps_shrink: Option<f64>,
    #[arg(long, default_value_t = 5e-9)]
    pub delta_term: f64,
    #[arg(long, default_value_t = 200)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Independent runs with seeds `seed`, `seed+1`, ...; the converged run
    /// with the highest final FIC is kept.
    #[arg(long, default_value_t = 1)]
    pub restarts: u64,
    /// Seeds the assignment of rows to workers; defaults to `--seed`.
    #[arg(long)]
    pub partition_seed: Option<u64>,
    #[arg(long, value_enum, default_value = "threads")]
    pub transport: TransportArg,
    /// Send each worker its rows over the transport instead of handing them over in memory.
    #[arg(long)]
    pub ship: bool,
    /// Socket workers load their own rows with `dfab worker --data`.
    #[arg(long, conflicts_with = "ship")]
    pub self_load: bool,
    /// Address socket workers connect to.
    #[arg(long, default_value = "127.0.0.1")]
    pub bind: String,
    #[arg(long, env = "DFAB_WORKER_PORT", default_value_t = 7070)]
    pub port: u16,
    /// Seconds to wait for every socket worker to connect.
    #[arg(long, default_value_t = 60)]
    pub connect_timeout: u64,
    /// Iterations between checkpoints; 0 disables them.
    #[arg(long, default_value_t = 20)]
    pub checkpoint_every: usize,
    /// Defaults to `<out-dir>/checkpoints`.
    #[arg(long)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Continue from a checkpoint file written by an earlier run on the same data.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Headed CSV file; a column named `--target` is ignored if present.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub target: String,
    /// Output CSV; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "y")]
    pub target: String,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Show thresholds and weights in the standardized space the model was trained in.
    #[arg(long)]
    pub standardized: bool,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    /// Coordinator address as host:port.
    #[arg(long)]
    pub connect: String,
    /// Load this worker's rows from a CSV file instead of receiving them.
    /// Target, task, holdout and split seed must match the coordinator's.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "y")]
    pub target: String,
    #[arg(long, value_enum, default_value = "regression")]
    pub task: Task,
    #[arg(long, default_value_t = 0.0)]
    pub holdout: f64,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Seconds to keep retrying the connection.
    #[arg(long, default_value_t = 60)]
    pub connect_timeout: u64,
}
