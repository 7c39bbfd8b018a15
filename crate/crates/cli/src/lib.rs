//! Command-line pipeline around the `pressgen` library: synthesize datasets,
//! train the codec and the generator, generate pressure sequences from text,
//! evaluate them, and run the downstream recognition experiments.
//!
//! Every command reads one JSON config (`--config`), writes its artifacts
//! under a run directory, and finishes by writing a run manifest recording
//! the exact config bytes, input hashes, and outputs. Reruns with the same
//! config and seeds reproduce every artifact bit for bit.

pub mod commands;
pub mod config;
pub mod error;
pub mod runmeta;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use error::CliError;
use runmeta::RunContext;

#[derive(Parser, Debug)]
#[command(name = "pressgen", version, about = "Ground-pressure sequence modeling pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: PathBuf,
    /// Where artifacts land; overrides the config's `run_dir`.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Overrides the config's global seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a procedural pressure dataset.
    Synth(CommonArgs),
    /// Train the vector-quantized autoencoder.
    TrainCodec(CommonArgs),
    /// Train the text-conditioned generator.
    TrainGenerator(CommonArgs),
    /// Generate pressure sequences from text prompts.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Prompt(s) overriding the config's text list.
        #[arg(long = "text")]
        texts: Vec<String>,
        /// Also render per-frame heatmap PNGs.
        #[arg(long)]
        plot: bool,
    },
    /// Score a generated set against a reference set.
    Evaluate(CommonArgs),
    /// Run the activity-recognition experiment over training recipes.
    Har(CommonArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::TrainCodec(_) => "train-codec",
            Command::TrainGenerator(_) => "train-generator",
            Command::Generate { .. } => "generate",
            Command::Evaluate(_) => "evaluate",
            Command::Har(_) => "har",
        }
    }

    fn common(&self) -> &CommonArgs {
        match self {
            Command::Synth(c)
            | Command::TrainCodec(c)
            | Command::TrainGenerator(c)
            | Command::Evaluate(c)
            | Command::Har(c) => c,
            Command::Generate { common, .. } => common,
        }
    }
}

/// Execute one command; on success the run manifest has been written.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let common = cli.command.common();
    let mut ctx = RunContext::new(
        &common.config,
        common.run_dir.as_deref(),
        common.seed,
    )?;
    match &cli.command {
        Command::Synth(_) => commands::cmd_synth(&mut ctx)?,
        Command::TrainCodec(_) => commands::cmd_train_codec(&mut ctx)?,
        Command::TrainGenerator(_) => commands::cmd_train_generator(&mut ctx)?,
        Command::Generate { texts, plot, .. } => commands::cmd_generate(&mut ctx, texts, *plot)?,
        Command::Evaluate(_) => commands::cmd_evaluate(&mut ctx)?,
        Command::Har(_) => commands::cmd_har(&mut ctx)?,
    }
    ctx.write_manifest(cli.command.name())?;
    Ok(())
}
