use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "gmc", version, about = "Question-gated sparse ResNeXt toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Analytical multiply-accumulate counts for one or more k.
    Flops(FlopsArgs),
    /// Randomized sparse-versus-dense equivalence trials.
    Verify(VerifyArgs),
    /// Finite-difference checks of every backward pass.
    Gradcheck(GradcheckArgs),
    /// Train on the synthetic colour-quadrant task.
    Train(TrainArgs),
    /// Accuracy and expert usage on a validation set.
    Eval(EvalArgs),
    /// Export per-sample gate decisions as CSV.
    InspectGates(InspectArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Sparse,
    Dense,
}

#[derive(Args, Debug)]
pub struct FlopsArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated active expert counts; defaults to the config's k.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    /// Per-layer CSV; with several k values `-k<K>` is added to the file stem.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Override the input size, e.g. `224x224`.
    #[arg(long, value_parser = parse_hw)]
    pub input: Option<(usize, usize)>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
    /// Corrupt the sparse gather path; the run must then fail.
    #[arg(long)]
    pub inject_fault: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Run every check (the default when --only is absent).
    #[arg(long, conflicts_with = "only")]
    pub all: bool,
    /// Run the checks whose name contains this text.
    #[arg(long)]
    pub only: Option<String>,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    /// Seeds initialization, the dataset and batch order; defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, value_enum, default_value_t = Mode::Sparse)]
    pub mode: Mode,
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
    #[arg(long, default_value_t = 4096)]
    pub n_train: usize,
    #[arg(long, default_value_t = 1024)]
    pub n_val: usize,
    /// Validation accuracy every this many steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
    #[arg(long, default_value = "trace.csv")]
    pub trace: PathBuf,
    /// Directory for `config.json` and `params.bin`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ModelSource {
    /// Trained model directory written by `train --checkpoint`.
    #[arg(long, required_unless_present = "config", conflicts_with = "config")]
    pub checkpoint: Option<PathBuf>,
    /// Untrained model initialized from the config seed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Element type for --config models; checkpoints carry their own.
    #[arg(long, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
    #[arg(long)]
    pub k: Option<usize>,
    /// Dataset seed; defaults to the model's config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training-set size used when the data was generated, so the
    /// validation split matches `train`.
    #[arg(long, default_value_t = 4096)]
    pub n_train: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long, default_value_t = 1024)]
    pub samples: usize,
    #[arg(long, value_enum, default_value_t = Mode::Sparse)]
    pub mode: Mode,
    /// Write the logits as a tensor dump.
    #[arg(long)]
    pub dump: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    #[command(flatten)]
    pub model: ModelSource,
    #[arg(long, default_value_t = 16)]
    pub samples: usize,
    /// CSV destination; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_hw(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("input extents must be positive".into());
    }
    Ok((h, w))
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags or inputs: exit 2.
    Usage(String),
    /// A check ran and did not pass; details already printed: exit 1.
    Check,
    /// Library error while running: exit 1.
    Run(gmc_core::Error),
}

impl From<gmc_core::Error> for Failure {
    fn from(e: gmc_core::Error) -> Self {
        match e {
            gmc_core::Error::KOutOfRange { .. } | gmc_core::Error::Config(_) => Failure::Usage(e.to_string()),
            e => Failure::Run(e),
        }
    }
}

pub fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

pub fn load_config(path: &Path) -> Result<gmc_core::netconfig::NetworkConfig, Failure> {
    gmc_core::netconfig::load_config(path).map_err(|e| match e {
        gmc_core::Error::Io(io) => usage(format!("cannot read {}: {io}", path.display())),
        e => usage(format!("{}: {e}", path.display())),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Flops(a) => commands::flops(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::InspectGates(a) => commands::inspect_gates(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => ExitCode::from(1),
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
