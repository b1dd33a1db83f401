use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

use commands::Failure;

/// Learned cubature Kalman filtering: data generation, training,
/// evaluation and benchmarks.
#[derive(Debug, Parser)]
#[command(name = "ckfnet", version, about)]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Simulate train/val/test trajectories and write them as JSON lines.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a network and write its best-validation weights.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory holding train.jsonl and val.jsonl from `gen-data`.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from <out>/checkpoint.txt.
        #[arg(long)]
        resume: bool,
    },
    /// Test-set AMSE of CKF, KF oracle and CKFNet.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Weights file, default <out>/weights.txt.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Directory holding test.jsonl from `gen-data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-trajectory wall time of each filter.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// AMSE on fresh test sets of 100, 120, 150 and 180 steps.
    Horizon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// AMSE with data noise scaled by 0.5, 1, 2 and 5 against a CKF that
    /// keeps the nominal covariances.
    NoiseSweep {
        #[command(flatten)]
        common: Common,
        /// One weights file reused at every scale, or one per scale.
        #[arg(long)]
        weights: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker thread cap.
    #[arg(long)]
    pub threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("ckfnet: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli.verb) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("ckfnet: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(err)) => {
            eprintln!("ckfnet: error: {err:#}");
            ExitCode::from(1)
        }
    }
}
