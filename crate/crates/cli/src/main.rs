//! `dasconv`: audit, gradient checks, training, evaluation, prediction and
//! dataset tooling for the DAS-Conv segmentation network.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dasconv_core::data::SplitSpec;
use dasconv_core::Error;

#[derive(Parser, Debug)]
#[command(name = "dasconv", version, about = "DAS-Conv segmentation toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Count parameters and MACs and check them against the published figures.
    Audit(AuditArgs),
    /// Finite-difference gradient checks of the primitive ops.
    Gradcheck(GradcheckArgs),
    /// Train on a corpus; writes the best checkpoint and a CSV log.
    Train(TrainArgs),
    /// Per-class IoU table for a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Write one class-index PNG per image.
    Predict(PredictArgs),
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Flatten labels, normalise images and count class pixels.
    Preprocess(PreprocessArgs),
}

#[derive(Args, Debug, Clone)]
pub struct AuditArgs {
    /// Model config JSON; defaults to the reference model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory for audit.txt, audit.json and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config's init seed (does not affect counts).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Batch size of the audited input.
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// mIoU gain in percentage points; adds an effectiveness score.
    #[arg(long)]
    pub diff_miou: Option<f64>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Op name or `all`.
    #[arg(default_value = "all")]
    pub scope: String,
    /// Directory for gradcheck.txt, gradcheck.json and manifest.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0x5eed)]
    pub seed: u64,
    /// Random shapes per op.
    #[arg(long, default_value_t = 5)]
    pub cases: usize,
    /// Scale the named op's backward by 1.01 (mutation fixture).
    #[arg(long, value_name = "OP")]
    pub inject_fault: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Corpus root (images/rgb, images/nir, labels/<class>, masks).
    #[arg(long)]
    pub data: PathBuf,
    /// train:val:test ratios, or `all` to use every image in each role.
    #[arg(long, default_value = "6:2:2")]
    pub split: SplitSpec,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    /// Model config JSON; defaults to the reference model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training hyperparameter JSON (lr_max, lr_min, momentum, ...).
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Seeds weight init, shuffling, augmentation and dropout.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Start from these weights; the checkpoint's config wins over --config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Channel multiplier applied on top of the model config.
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Disable flips, rotations and colour jitter.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Split part to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    pub subset: String,
    /// Accepted for uniformity; evaluation is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct PredictArgs {
    /// Corpus root; labels are not needed.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Accepted for uniformity; prediction is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of images.
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = 512)]
    pub size: usize,
}

#[derive(Args, Debug, Clone)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Accepted for uniformity; preprocessing is deterministic.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// 2 for bad input (config, paths, usage); 1 for everything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::ConfigViolations(_)
        | Error::Usage(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Ingestion(_)
        | Error::Format(_)
        | Error::Image(_) => 2,
        _ => 1,
    }
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("DASCONV_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| format!("DASCONV_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
