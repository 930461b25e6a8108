//! `mambareg` command-line driver.

mod commands;
mod panel;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mambareg::metrics::DiceConvention;
use mambareg::training::AblationPreset;

#[derive(Parser, Debug)]
#[command(name = "mambareg", version, about = "Multi-modal deformable image registration")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true, env = "MAMBAREG_CONFIG")]
    pub config: Option<PathBuf>,
    /// Seed for every random stream of the run.
    #[arg(long, global = true, env = "MAMBAREG_SEED")]
    pub seed: Option<u64>,
    /// Output directory; receives the resolved config.toml and run.log.
    #[arg(long, global = true, env = "MAMBAREG_OUT")]
    pub out: Option<PathBuf>,
    /// Compute device (only "cpu").
    #[arg(long, global = true, env = "MAMBAREG_DEVICE")]
    pub device: Option<String>,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true, env = "MAMBAREG_FORCE")]
    pub force: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic two-modality dataset with train, test and aligned manifests.
    Synth {
        #[arg(long)]
        train_pairs: Option<usize>,
        #[arg(long)]
        test_pairs: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        magnitude: Option<f64>,
    },
    /// Crop, pair, split and mask a raw `<plant>/{rgb,ir}/<ts>.png` dataset.
    BuildDataset {
        #[arg(long)]
        src: Option<PathBuf>,
        #[arg(long)]
        train_pairs: Option<usize>,
        #[arg(long)]
        test_pairs: Option<usize>,
    },
    /// Compute ROI masks for every image named in the dataset's manifests.
    GenMasks {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Single manifest to process instead of all of train/test/aligned.
        #[arg(long)]
        manifest: Option<String>,
    },
    /// Stage 1: pre-train the guidance network on aligned pairs.
    Pretrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Stage 2: train the registration network with the frozen guidance network.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<String>,
        /// Stage 1 checkpoint.
        #[arg(long)]
        agnet: Option<PathBuf>,
        /// Ablation preset b1..b6.
        #[arg(long)]
        ablation: Option<AblationPreset>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Register one pair and write the warped image and a comparison panel.
    Register {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        moving: Option<PathBuf>,
        #[arg(long)]
        fixed: Option<PathBuf>,
    },
    /// Score a checkpoint on a manifest; exits with status 2 if any metric is NaN.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dice_convention: Option<DiceConvention>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::BuildDataset { .. } => "build-dataset",
            Command::GenMasks { .. } => "gen-masks",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Register { .. } => "register",
            Command::Evaluate { .. } => "evaluate",
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
