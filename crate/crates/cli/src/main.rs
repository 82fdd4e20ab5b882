//! `ien`: synthesize data, train, evaluate and meter implicitly equivariant
//! networks, and run the numerical self-checks.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 usage error,
//! 3 non-finite value during training, 4 a check failed.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use manifest::RunManifest;

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NAN: u8 = 3;
pub const EXIT_CHECK: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "ien", version, about = "Implicitly equivariant CNNs on the CPU")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed; overrides the training seed (and the synthesis seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Single-threaded, bit-reproducible execution. IEN_THREADS is ignored.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Checkpoint to resume from (train) or to read (eval, meter).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthesized dataset as IDX files.
    GenData,
    /// Train and write metrics.csv, summary.json and checkpoints.
    Train {
        /// Stop once this many epochs are complete.
        #[arg(long)]
        until: Option<u64>,
    },
    /// Validation accuracy of a checkpoint.
    Eval,
    /// Per-layer equivariance report of a checkpoint (or of a fresh model).
    Meter,
    /// Finite-difference gradient checks of every tape operation.
    Gradcheck,
    /// Meter a hand-built C4-equivariant network; every reading must be ~0.
    OracleVerify {
        /// Conv layers in the oracle.
        #[arg(long, default_value_t = 3)]
        layers: usize,
        /// Base filters per layer.
        #[arg(long, default_value_t = 4)]
        base_filters: usize,
        /// Random inputs to meter.
        #[arg(long, default_value_t = 16)]
        inputs: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval => "eval",
            Command::Meter => "meter",
            Command::Gradcheck => "gradcheck",
            Command::OracleVerify { .. } => "oracle-verify",
        }
    }
}

/// A check ran to completion and reported failure.
#[derive(Debug)]
pub struct CheckFailed(pub String);

impl std::fmt::Display for CheckFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for CheckFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_CHECK;
    }
    match err.downcast_ref::<ien_core::Error>() {
        Some(ien_core::Error::NonFinite(_)) => EXIT_NAN,
        _ => EXIT_CONFIG,
    }
}

fn configure_threads(common: &Common) -> usize {
    let n = if common.deterministic {
        1
    } else {
        std::env::var("IEN_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1)
    };
    ien_core::set_threads(n);
    ien_core::threads()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let mut manifest = RunManifest::new(cli.command.name());
    manifest.deterministic = cli.common.deterministic;
    manifest.threads = configure_threads(&cli.common);

    let result = std::fs::create_dir_all(&cli.common.out)
        .map_err(anyhow::Error::from)
        .and_then(|_| commands::run(&cli.command, &cli.common, &mut manifest));
    let code = match &result {
        Ok(()) => 0,
        Err(e) => exit_code(e),
    };
    manifest.finish(started.elapsed(), code as i32);
    if cli.common.out.is_dir() {
        if let Err(e) = manifest.write(&cli.common.out) {
            eprintln!("warning: could not write manifest: {e:#}");
        }
    }
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
