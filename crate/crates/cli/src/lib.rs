//! `sganvo` command line: training, evaluation, gradient checks and
//! synthetic scene generation.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! abort, 4 gradient-check failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sganvo::Error;

pub mod commands;
pub mod config;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_GRADCHECK: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "sganvo", version, about = "Stacked adversarial visual odometry")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a stack and evaluate it on the configured data.
    Train(TrainArgs),
    /// Depth metrics of a checkpoint (or of depth maps on disk).
    EvalDepth(EvalDepthArgs),
    /// Drift and ATE of a checkpoint (or of a pose file).
    EvalOdom(EvalOdomArgs),
    /// Run the finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Render the configured synthetic scene to a directory.
    SynthGen(CommonArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Use the adversarial signs exactly as printed in the original
    /// formulation instead of the standard WGAN-GP pairing.
    #[arg(long)]
    pub paper_literal_signs: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Train every (layers, window) cell of the ablation grid
    /// (1,2), (1,3), (2,3) and report one row per cell.
    #[arg(long)]
    pub grid: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalDepthArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score 16-bit depth PNGs (read in name order) instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub depth_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalOdomArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score a KITTI-format pose file (or a directory of `<sequence>.txt`
    /// files) instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub poses: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    /// `all`, a module (tensor, geometry, layers, losses) or a check name.
    #[arg(default_value = "all")]
    pub scope: String,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Scale the gradients of one backward op (self-test of the checker).
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    use sganvo_tensor::TensorError as T;
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Data(_) | Error::Io { .. } => EXIT_DATA,
        Error::Numerical(_) => EXIT_NUMERICAL,
        Error::Tensor(T::NonFinite { .. } | T::NonFiniteGradient(_)) => EXIT_NUMERICAL,
        Error::Tensor(T::Checkpoint(_)) => EXIT_DATA,
        Error::Tensor(_) => EXIT_CONFIG,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Reports go to `out`, diagnostics to stderr.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a, out).map(|_| EXIT_OK),
        Command::EvalDepth(a) => commands::eval_depth(&a, out).map(|_| EXIT_OK),
        Command::EvalOdom(a) => commands::eval_odom(&a, out).map(|_| EXIT_OK),
        Command::Gradcheck(a) => commands::gradcheck(&a, out),
        Command::SynthGen(a) => commands::synth_gen(&a, out).map(|_| EXIT_OK),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
