use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

/// Configuration problems map to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

#[derive(Parser)]
#[command(name = "cast", version, about = "Superpixel-token recognition with an internal segmentation hierarchy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// JSON pipeline config; defaults are used for missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Dot-path override into the JSON config, e.g. `model.channels=16`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Objective {
    Supervised,
    Contrastive,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum BackboneArg {
    Cast,
    Vit,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic images and their part masks.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 4)]
        n: usize,
    },
    /// Segment one image: level maps, parent table and overlay.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Add an inference-time level with this many segments.
        #[arg(long)]
        extra_pool: Option<usize>,
    },
    /// Train on the synthetic set.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `train.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value_t = Objective::Supervised)]
        objective: Objective,
        #[arg(long, value_enum, default_value_t = BackboneArg::Cast)]
        backbone: BackboneArg,
    },
    /// Linear probe on frozen embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare label maps, or evaluate a checkpoint on the synthetic test set.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        #[arg(long, conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
    },
    /// One test-time adaptation step per test image.
    Tta {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Finite-difference check of the full model's gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        entries_per_param: usize,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<cast_core::Error>() {
        Some(cast_core::Error::InvalidConfig(_) | cast_core::Error::ConfigMismatch(_) | cast_core::Error::Json(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { common, n } => commands::synth(&common, n),
        Command::Segment { common, image, checkpoint, extra_pool } => {
            commands::segment(&common, &image, &checkpoint, extra_pool)
        }
        Command::Train { common, epochs, objective, backbone } => commands::train(&common, epochs, objective, backbone),
        Command::Probe { common, checkpoint } => commands::probe(&common, &checkpoint),
        Command::Eval { common, pred, gt, checkpoint } => commands::eval(&common, pred.zip(gt), checkpoint.as_deref()),
        Command::Tta { common, checkpoint, samples } => commands::tta(&common, &checkpoint, samples),
        Command::Gradcheck { common, entries_per_param } => commands::gradcheck(&common, entries_per_param),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
