//! `demads`: file-based stages of the misconfiguration-detection pipeline.
//!
//! Every command reads a JSON config (`--config`), writes its data outputs
//! into `--out`, and optionally echoes the main table to standard output in
//! `--format`. Verbosity on standard error follows `DEMADS_LOG`.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "demads",
    version,
    about = "Detect misconfigured PV inverters in LV grids"
)]
pub struct Cli {
    /// JSON config of the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config's seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Also print the main table to standard output.
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Md,
    Json,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random radial grid with PV inverters.
    GenGrid {
        #[arg(long)]
        buses: Option<usize>,
        #[arg(long)]
        feeders: Option<usize>,
        #[arg(long)]
        pv_buses: Option<usize>,
    },
    /// Simulate a scenario into measurement CSVs.
    Simulate,
    /// Train the substation load estimator of one grid.
    TrainEstimator,
    /// Pretrain a device-level detector on simulated grids.
    PretrainDetector,
    /// Run the daily monitoring protocol over a measurement set.
    Monitor,
    /// Run the transformer-level detection benchmark.
    Benchmark,
    /// Score a monitoring report against the scenario's ground truth.
    Evaluate,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DEMADS_LOG", "error")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn require_out(cli: &Cli) -> Result<&PathBuf, CliError> {
    cli.out
        .as_ref()
        .ok_or_else(|| CliError::Usage("--out <dir> is required".into()))
}
