//! Command implementations behind the `babelkit` binary.
//!
//! Every command writes its outputs under one directory (or one file for
//! `sample`) and finishes with an atomically written [`RunManifest`].

pub mod commands;
mod failure;
mod manifest;

pub use failure::Failure;
pub use manifest::{write_atomic, write_json_atomic, RunManifest, MANIFEST_FILE};

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const THREADS_ENV: &str = "BABELKIT_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "babelkit",
    version,
    about = "Multi-modal detection evaluation and alignment experiments"
)]
pub struct Cli {
    /// Seed overriding the one in the config or recipe.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate detections against ground truth per modality.
    Eval(EvalArgs),
    /// Harmonic mean of per-modality mAPs given in percent.
    Hmap(HmapArgs),
    /// Pretrain the encoder through the frozen language pivot.
    Align(AlignArgs),
    /// Run the gradient-lab experiments.
    Gradlab(GradlabArgs),
    /// Draw one epoch from a mixture recipe.
    Sample(SampleArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long)]
    pub registry: PathBuf,
    /// `all-points` or `101pt`.
    #[arg(long, default_value = "all-points")]
    pub ap_mode: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HmapArgs {
    #[arg(required = true, allow_hyphen_values = true)]
    pub values: Vec<String>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradlabArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub recipe: PathBuf,
    /// Manifest CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Size the global thread pool from `BABELKIT_THREADS` (0 or unset = auto).
pub fn configure_threads(value: Option<&str>) -> Result<(), Failure> {
    let Some(v) = value else { return Ok(()) };
    let n: usize = v.trim().parse().map_err(|_| {
        Failure::input(format!(
            "{THREADS_ENV} must be a non-negative integer, got `{v}`"
        ))
    })?;
    // A pool built earlier in the same process is fine to keep.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Eval(a) => commands::eval(&a, cli.seed).map(drop),
        Command::Hmap(a) => commands::hmap(&a).map(|line| println!("{line}")),
        Command::Align(a) => commands::align(&a, cli.seed).map(drop),
        Command::Gradlab(a) => commands::gradlab(&a, cli.seed).map(drop),
        Command::Sample(a) => commands::sample(&a, cli.seed).map(drop),
    }
}
