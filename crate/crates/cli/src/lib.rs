//! `mtvif` command-line front end: synthetic data, training, fusion,
//! evaluation, ablation and gradient analysis.

mod commands;
pub mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags or configuration; nothing was run.
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error(transparent)]
    Core(#[from] mtvif::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(mtvif::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mtvif", version, about = "Multi-task visible/infrared image fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file overriding the profile defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base settings: `desk` or `paper`.
    #[arg(long, default_value = "desk")]
    pub profile: String,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        /// Scene size as `HxW` (square) or a single side.
        #[arg(long)]
        size: Option<String>,
        #[arg(long)]
        classes: Option<usize>,
        /// Allow writing into a non-empty directory.
        #[arg(long)]
        force: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on a dataset directory and write the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Disable a component: hia_f, seg_loss, color_loss or one_channel.
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Record fusion/segmentation gradient projections during training.
        #[arg(long)]
        log_grad_projection: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run a checkpoint over source pairs and write fused images and label maps.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the two branch feature maps as mosaics.
        #[arg(long)]
        dump_features: bool,
        /// Model configuration the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score fused images against their sources.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        vis: PathBuf,
        #[arg(long)]
        ir: PathBuf,
        /// Ground-truth label maps; requires --ckpt.
        #[arg(long, requires = "ckpt")]
        labels: Option<PathBuf>,
        /// Model whose segmentation branch is scored on the source pairs.
        #[arg(long, requires = "labels")]
        ckpt: Option<PathBuf>,
        /// Output directory for metrics.jsonl and metrics.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Gradient projections between the fusion and segmentation losses.
    GradAnalyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: usize,
        /// JSON lines file: one record per batch, then a summary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score several ablation variants on the same data.
    Ablation {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated: full, hia_f, seg_loss, color_loss, one_channel.
        #[arg(long, value_delimiter = ',', default_value = "full,hia_f,seg_loss,color_loss,one_channel")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "1")]
        seeds: Vec<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { out, count, size, classes, force, cfg } => {
            commands::synth(&out, count, size.as_deref(), classes, force, &cfg)
        }
        Command::Train { data, out, ablate, epochs, log_grad_projection, cfg } => {
            commands::train(&data, &out, &ablate, epochs, log_grad_projection, &cfg)
        }
        Command::Fuse { ckpt, vis, ir, out, dump_features, config } => {
            commands::fuse(&ckpt, &vis, &ir, &out, dump_features, config.as_deref())
        }
        Command::Eval { fused, vis, ir, labels, ckpt, out } => {
            commands::eval(&fused, &vis, &ir, labels.as_deref(), ckpt.as_deref(), &out)
        }
        Command::GradAnalyze { ckpt, data, steps, out } => commands::grad_analyze(&ckpt, &data, steps, &out),
        Command::Ablation { data, out, variants, seeds, epochs, cfg } => {
            commands::ablation(&data, &out, &variants, &seeds, epochs, &cfg)
        }
    }
}

/// Parses `std::env::args`, runs, and maps the outcome to the process exit
/// code: 0 success, 2 usage or validation, 1 runtime failure.
pub fn main_with_args() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
