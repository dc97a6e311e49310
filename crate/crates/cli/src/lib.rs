//! Command implementations behind the `icmf` binary.

pub mod commands;
pub mod config;
pub mod error;

use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub use config::{CliConfig, CommonArgs, ModelArgs, TrainArgs};
pub use error::{CliError, CliResult};

#[derive(Parser, Debug)]
#[command(name = "icmf", version, about = "Click-based interactive segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model and write checkpoints plus an NDJSON step log.
    Train(TrainCmd),
    /// Run the click protocol over a dataset and report NoC/NoF.
    Eval(EvalCmd),
    /// Replay a click file on one image, or let the click oracle drive it.
    Simulate(SimulateCmd),
    /// Finite-difference check of the full loss gradient.
    Gradcheck(GradcheckCmd),
    /// Write a synthetic image/mask dataset as PNG pairs.
    Synth(SynthCmd),
    /// Start the HTTP session service.
    Serve(ServeCmd),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Stub {
    /// Always returns the ground truth.
    Oracle,
    /// Always returns an empty mask.
    Empty,
    /// One more image quadrant per click.
    Quadrant,
}

/// Where masks come from: a checkpoint or a stub.
#[derive(Args, Clone, Debug, Default)]
pub struct BackendArgs {
    #[arg(long, conflicts_with_all = ["stub", "oracle"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub stub: Option<Stub>,
    /// Shorthand for `--stub oracle`.
    #[arg(long, conflicts_with = "stub")]
    pub oracle: bool,
}

impl BackendArgs {
    pub fn stub(&self) -> Option<Stub> {
        if self.oracle {
            Some(Stub::Oracle)
        } else {
            self.stub
        }
    }
}

/// Input data: a directory of `name.png` / `name_mask.png` pairs or a
/// generated synthetic set.
#[derive(Args, Clone, Debug, Default)]
pub struct DataArgs {
    #[arg(long, conflicts_with = "synth")]
    pub data_dir: Option<PathBuf>,
    /// Number of synthetic samples to generate.
    #[arg(long)]
    pub synth: Option<usize>,
    /// Seed of the synthetic set (defaults to the run seed).
    #[arg(long)]
    pub data_seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory for checkpoints and the step log.
    #[arg(long)]
    pub out: PathBuf,
    /// Write a checkpoint every N steps (0: final only).
    #[arg(long, default_value_t = 100)]
    pub checkpoint_every: usize,
    /// Continue from a checkpoint that carries optimizer state.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = icmf_core::eval::MAX_CLICKS)]
    pub max_clicks: usize,
    /// Parallel instances (default: number of cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Directory for summary.json and records.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub gt: Option<PathBuf>,
    /// JSON list of {"row", "col", "positive"} in image pixels. Without it
    /// the click oracle picks clicks against --gt.
    #[arg(long)]
    pub clicks: Option<PathBuf>,
    #[arg(long, default_value_t = icmf_core::eval::MAX_CLICKS)]
    pub max_clicks: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Number of parameter scalars to probe.
    #[arg(long, default_value_t = 64)]
    pub n_params: usize,
    #[arg(long, default_value_t = icmf_core::gradcheck::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Negative control: scale the analytic gradient by 1000 and expect failure.
    #[arg(long)]
    pub corrupt_backward: bool,
}

#[derive(Args, Debug)]
pub struct SynthCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ServeCmd {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    /// Directory of static files served at the root.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 30 * 60)]
    pub ttl_secs: u64,
    #[arg(long, default_value_t = 64)]
    pub capacity: usize,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Eval(c) => commands::eval(&c),
        Command::Simulate(c) => commands::simulate(&c),
        Command::Gradcheck(c) => commands::gradcheck(&c),
        Command::Synth(c) => commands::synth(&c),
        Command::Serve(c) => commands::serve(&c),
    }
}
