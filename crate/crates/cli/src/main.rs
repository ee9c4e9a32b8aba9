//! Command-line front end: phantom generation, training, FROC evaluation and prediction.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nodule_detect::DecoderType;

use config::{Overrides, Preset};

#[derive(Parser)]
#[command(name = "nodule-detect", version, about = "Two-stage lung nodule detection on 2.5D CT slices")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML file overlaid on the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base configuration.
    #[arg(long, global = true)]
    pub preset: Option<Preset>,
    /// Seed for phantom generation and training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Decoder type: type1 or type2.
    #[arg(long, global = true)]
    pub decoder: Option<DecoderType>,
    /// Compute device; only cpu is available.
    #[arg(long, global = true, default_value = "cpu")]
    pub device: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom CT dataset.
    Generate {
        /// Dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_volumes: Option<usize>,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train a detector, writing a checkpoint per epoch.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory for checkpoints and the loss log.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Write into a non-empty run directory.
        #[arg(long)]
        force: bool,
    },
    /// FROC evaluation on a dataset.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score an existing detections CSV instead of running a model.
        #[arg(long)]
        detections_file: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Detect nodules and write overlays plus a detections CSV.
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A dataset directory or one or more volume files.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.common.device != "cpu" {
        eprintln!("warning: device {:?} is not available, running on cpu", cli.common.device);
    }
    let ov = Overrides {
        preset: cli.common.preset,
        seed: cli.common.seed,
        decoder: cli.common.decoder,
    };
    let run = || -> anyhow::Result<()> {
        let resolved = config::resolve(cli.common.config.as_deref(), &ov)?;
        print!("{}", resolved.config.to_toml()?);
        println!();
        match cli.command {
            Command::Generate { out, n_volumes, force } => {
                commands::generate(&resolved.config, out.as_deref(), n_volumes, force)
            }
            Command::Train {
                data,
                out,
                resume,
                force,
            } => commands::train(&resolved, data.as_deref(), out.as_deref(), resume.as_deref(), force),
            Command::Eval {
                data,
                checkpoint,
                detections_file,
                out,
            } => commands::eval(
                &resolved,
                data.as_deref(),
                checkpoint.as_deref(),
                detections_file.as_deref(),
                out.as_deref(),
            ),
            Command::Predict { checkpoint, input, out } => {
                commands::predict(&resolved, checkpoint.as_deref(), &input, out.as_deref())
            }
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
