//! `fpad`: synthetic data, training, inference, evaluation and CAM export.
//!
//! Exit status is 0 on success, 1 for invalid input or configuration and 2
//! for failures while running.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fpad_core::backbone::Arch;
use fpad_core::evaluation::Protocol;
use fpad_core::scoring::FusionWeights;
use fpad_core::{Error, Result};

use commands::{EvalOptions, Stage};
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "fpad", version, about = "Fingerprint presentation attack detection")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_parser = parse_arch)]
    arch: Option<Arch>,
    /// Fusion weights `wg,wl,ws`.
    #[arg(long, global = true, value_parser = parse_weights)]
    weights: Option<FusionWeights>,
    #[arg(long, global = true, value_parser = parse_protocol)]
    protocol: Option<Protocol>,
    /// Dataset manifest.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cross-material dataset.
    Synth {
        /// Live samples across all splits.
        #[arg(long)]
        live: Option<usize>,
        /// Spoof samples across all splits.
        #[arg(long)]
        spoof: Option<usize>,
    },
    /// Train one stage.
    Train {
        #[arg(value_enum)]
        stage: StageArg,
    },
    /// Score the test split, or one image, with the global and local models.
    Infer {
        #[arg(long)]
        image: Option<PathBuf>,
    },
    /// Compute metrics from a score file or from checkpoints.
    Eval {
        #[arg(long)]
        scores: Option<PathBuf>,
        /// Also write a CSV table.
        #[arg(long)]
        csv: bool,
        /// Also render ROC curves.
        #[arg(long)]
        roc: bool,
    },
    /// Export L-CAM, S-CAM and the two extracted patches for one image.
    Cam {
        #[arg(long)]
        image: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    Global,
    LocalPretext,
    Local,
}

fn parse_arch(s: &str) -> std::result::Result<Arch, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_weights(s: &str) -> std::result::Result<FusionWeights, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_protocol(s: &str) -> std::result::Result<Protocol, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        out: common.out.clone(),
        arch: common.arch,
        weights: common.weights,
        protocol: common.protocol,
        manifest: common.data.clone(),
    });
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::Synth { live, spoof } => commands::synth(&cfg, live, spoof).map(drop),
        Command::Train { stage } => {
            let stage = match stage {
                StageArg::Global => Stage::Global,
                StageArg::LocalPretext => Stage::LocalPretext,
                StageArg::Local => Stage::Local,
            };
            commands::train(&cfg, stage).map(drop)
        }
        Command::Infer { image } => commands::infer(&cfg, image.as_deref()).map(drop),
        Command::Eval { scores, csv, roc } => commands::eval(&cfg, &EvalOptions { scores, csv, roc }).map(drop),
        Command::Cam { image } => commands::cam(&cfg, &image).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
