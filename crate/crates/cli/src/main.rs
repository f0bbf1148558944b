//! `saliency`: generate data, train, evaluate, infer, check gradients and run
//! the three-variant ablation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use saliency_core::Variant;

#[derive(Debug, Parser)]
#[command(name = "saliency", version, about = "Salient object detection with pyramid self-attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic shape dataset (images/*.ppm, masks/*.pgm).
    Generate(GenerateArgs),
    /// Train one model variant.
    Train(TrainArgs),
    /// Score a checkpoint (or a directory of predictions) on a dataset.
    Eval(EvalArgs),
    /// Write a saliency PGM for each input image.
    Infer(InferArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate baseline, baseline-sa and full with equal budgets.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Profile {
    /// Published protocol: 256×256 input, 24 epochs, lr 5e-5 then 5e-6.
    Reference,
    /// Small from-scratch setting: 64×64 input, 10 epochs, batch 4, lr 3e-3 then 3e-4.
    Desk,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub min_shapes: usize,
    #[arg(long, default_value_t = 3)]
    pub max_shapes: usize,
    /// Background texture amplitude.
    #[arg(long, default_value_t = 0.12)]
    pub texture: f64,
}

#[derive(Clone, Debug, Args)]
pub struct Hyper {
    #[arg(long, value_enum, default_value_t = Profile::Reference)]
    pub profile: Profile,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr1: Option<f64>,
    #[arg(long)]
    pub lr2: Option<f64>,
    #[arg(long)]
    pub phase1_epochs: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seeds weight initialization, shuffling and augmentation.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; 1 guarantees bit-reproducible runs.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root holding images/ and masks/.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "full", value_parser = parse_variant)]
    pub variant: Variant,
    #[command(flatten)]
    pub hyper: Hyper,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Score existing `<id>.pgm` maps instead of running a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write every prediction as `<id>.pgm` into this directory.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    /// Refuse checkpoints built for a different variant.
    #[arg(long, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[arg(long, default_value_t = saliency_core::metrics::DEFAULT_THRESHOLDS)]
    pub thresholds: usize,
    /// Average precision and recall per image instead of pooling counts.
    #[arg(long)]
    pub per_image: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(required = true)]
    pub images: Vec<PathBuf>,
    /// Output directory; defaults to each image's own directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Break the backward rule of this op to confirm the suite notices.
    #[arg(long)]
    pub corrupt: Option<String>,
    #[arg(long)]
    pub skip_model: bool,
    /// Directory for report.json and the run manifest.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub hyper: Hyper,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

/// Failure classes, one per nonzero exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl From<saliency_core::Error> for Failure {
    fn from(e: saliency_core::Error) -> Self {
        match e {
            saliency_core::Error::NonFinite(_) => Failure::Numeric(e.into()),
            e => Failure::Data(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<saliency_core::Error>() {
            Ok(core) => core.into(),
            Err(e) => Failure::Data(e),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Infer(a) => commands::infer(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Data(e) | Failure::Numeric(e) => eprintln!("error: {e:#}"),
            }
            ExitCode::from(f.code())
        }
    }
}
