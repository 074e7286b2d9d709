//! `slrf` command line: data generation, training, rendering, evaluation,
//! benchmarking and gradient checking.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use slrf_core::CoreError;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;

#[derive(Debug, Parser, Serialize)]
#[command(name = "slrf", version, about = "Structured local radiance field avatars")]
pub struct Cli {
    /// Worker threads; 1 gives a fully serial run. Defaults to all cores.
    #[arg(long, global = true, env = "SLRF_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic multi-view dataset.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Render one image from a checkpoint.
    Render(RenderArgs),
    /// Render a frame sequence from a checkpoint.
    Animate(AnimateArgs),
    /// Replay PSNR/SSIM against ground truth.
    Eval(EvalArgs),
    /// Time dense and sparse field evaluation.
    Bench(BenchArgs),
    /// Finite-difference gradient check on a tiny configuration.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub frames: usize,
    #[arg(long, default_value_t = 4)]
    pub cameras: usize,
    #[arg(long, default_value_t = 96)]
    pub res: u32,
    #[arg(long, default_value_t = 6)]
    pub joints: usize,
    /// Defaults to `static` for a single frame and `dynamic` otherwise.
    #[arg(long)]
    pub difficulty: Option<DifficultyArg>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DifficultyArg {
    Static,
    Rigid,
    Dynamic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblateArg {
    NoResiduals,
    NoEmbeddings,
    Regressor,
    FrameCodes,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// JSON training config; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rays: Option<usize>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub ablate: Vec<AblateArg>,
    /// Continue from the newest checkpoint under `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Print a progress line every this many iterations; 0 disables.
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Replay,
    Novel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PathArg {
    Dense,
    Sparse,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundArg {
    White,
    Black,
}

/// Options shared by `render` and `animate`.
#[derive(Debug, Args, Serialize)]
pub struct ViewArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset supplying cameras and replay poses.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Camera index into the dataset, or a camera JSON file.
    #[arg(long, default_value = "0")]
    pub camera: String,
    #[arg(long, value_enum, default_value_t = ModeArg::Replay)]
    pub mode: ModeArg,
    /// Novel mode latent: `zeros` or a JSON array of 8 values (shared by all
    /// nodes) or nodes x 8 values.
    #[arg(long)]
    pub z: Option<String>,
    /// Ray samples; defaults to the checkpoint's training value.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_enum, default_value_t = BackgroundArg::White)]
    pub background: BackgroundArg,
    /// Write RGBA instead of RGB.
    #[arg(long)]
    pub alpha: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct RenderArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    /// Training frame to replay. Not allowed in novel mode.
    #[arg(long)]
    pub frame: Option<usize>,
    /// Pose JSON for novel mode; the rest pose when absent.
    #[arg(long)]
    pub pose: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct AnimateArgs {
    #[command(flatten)]
    pub view: ViewArgs,
    /// JSON array of poses for novel mode; the dataset poses when absent.
    #[arg(long)]
    pub poses: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// `train` (every view), `cameras:0,2` or `frames:0-7,9`.
    #[arg(long, default_value = "train")]
    pub split: String,
    #[arg(long, value_delimiter = ',', default_value = "psnr,ssim")]
    pub metrics: Vec<MetricArg>,
    #[arg(long)]
    pub samples: Option<usize>,
    /// Directory for `metrics.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Psnr,
    Ssim,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    /// Checkpoint to time; a freshly initialized model when absent.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PathArg::Both)]
    pub path: PathArg,
    #[arg(long, default_value_t = 128)]
    pub res: u32,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    #[arg(long, default_value_t = 64)]
    pub samples: usize,
    /// Initialization seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `bench.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = slrf_core::gradcheck::DEFAULT_STEP)]
    pub step: f64,
    /// Scale one group's analytic gradient by 1.1 (negative control).
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    /// Directory for `gradcheck.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Error carrying its exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(CoreError),
    /// Computation finished but a check failed.
    Check(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numerical() => EXIT_NUMERICAL,
            CliError::Core(_) => EXIT_USAGE,
            CliError::Check(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Check(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
