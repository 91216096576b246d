mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use segkit::data::SplitName;
use segkit::gradcheck::Scale;

#[derive(Parser)]
#[command(
    name = "segkit",
    version,
    about = "Train and run a U-Net/MobileNetV2 binary segmentation model"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. They override the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for splitting, initialization and augmentation.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Shuffle the dataset ids into a train/val/test manifest.
    Split {
        /// Dataset root with `images/` and `masks/`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Manifest to write.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fit the model with early stopping on the validation split.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Split manifest; defaults to `<out>/split.tsv`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
        /// Continue from a checkpoint written by an earlier run; the
        /// `best.ckpt` beside it supplies the best weights so far.
        #[arg(long, conflicts_with = "init")]
        resume: Option<PathBuf>,
        /// Start from the tensors of a checkpoint whose names and shapes
        /// match, e.g. a converted pretrained encoder.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: SplitName,
    },
    /// Write probability and binary mask PNGs for an image or a directory of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to the checkpoint's training threshold.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Compare every analytic gradient rule against finite differences.
    Gradcheck {
        /// `tiny` (S=32) or `small` (S=64) end-to-end network.
        #[arg(long, default_value = "tiny")]
        scale: Scale,
        /// Skew the named op's gradient to exercise the failure path.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let common = &cli.common;
    let result = match cli.command {
        Command::Split { dataset, manifest } => commands::split(common, dataset, manifest),
        Command::Train {
            dataset,
            manifest,
            max_epochs,
            resume,
            init,
        } => commands::train(common, dataset, manifest, max_epochs, resume, init),
        Command::Eval {
            checkpoint,
            dataset,
            manifest,
            split,
        } => commands::eval(common, &checkpoint, dataset, manifest, split),
        Command::Predict {
            checkpoint,
            input,
            threshold,
        } => commands::predict(common, &checkpoint, &input, threshold),
        Command::Gradcheck { scale, corrupt } => commands::gradcheck(common, scale, corrupt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
