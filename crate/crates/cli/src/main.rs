mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Preset;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] fplnet::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Runtime(fplnet::Error::Config(_)) => 1,
            _ => 2,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Parser)]
#[command(name = "fplnet", version, about = "Build, analyse, train and run factorized pyramidal segmentation networks")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// `key = value` file over the preset; unknown keys are rejected.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Starting network size (train-toy defaults to tiny, the rest to default).
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides the network and dataset seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Every file output goes here.
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "f32")]
    pub dtype: DType,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-layer table of operations, output shapes and trainable parameters.
    Summarize(ShapeArgs),
    /// Closed-form weight count of one module.
    Count(CountArgs),
    /// Two-stage training on the configured dataset, then held-out mIoU.
    TrainToy,
    /// Predicts label maps for PPM images with a saved checkpoint.
    Infer(InferArgs),
    /// Parameters, receptive field and gridding score of named variants.
    Ablate(AblateArgs),
    /// Per-layer receptive field of the configured network.
    Rf(ShapeArgs),
    /// Gridding score of a single block from its impulse response.
    GridCheck(GridArgs),
}

#[derive(Debug, Args)]
pub struct ShapeArgs {
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    #[arg(long, default_value_t = 1024)]
    pub width: usize,
}

#[derive(Debug, Args)]
pub struct CountArgs {
    /// conv, esp, fpl_decomp or fpl.
    #[arg(long)]
    pub module: String,
    #[arg(long)]
    pub ci: usize,
    #[arg(long)]
    pub co: usize,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 1)]
    pub b: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Variant names; all catalogued variants when empty.
    pub names: Vec<String>,
    #[command(flatten)]
    pub shape: ShapeArgs,
    /// Channel width of the module probed for gridding.
    #[arg(long, default_value_t = 8)]
    pub grid_channels: usize,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// conv, fpl or esp.
    #[arg(long, default_value = "fpl")]
    pub module: String,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    /// Branch fusion of the FPL module: pff, hff or none.
    #[arg(long, default_value = "pff")]
    pub fusion: String,
    #[arg(long, default_value_t = 4)]
    pub branches: usize,
    #[arg(long, default_value_t = 3)]
    pub kernel: usize,
    #[arg(long, default_value_t = 1)]
    pub dilation: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
