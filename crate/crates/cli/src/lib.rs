//! Command-line driver: training runs, evaluations, ablations and the theory
//! checks, with CSV and JSON outputs under a run directory.

pub mod commands;
pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Outcome;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "eow",
    version,
    about = "Open-world softmax training, calibration and theory checks"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// `key = value` config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output root; runs go to `<out>/<config-hash>-seed<seed>`
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Overrides the `dataset` key
    #[arg(long)]
    pub dataset: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed and score it on the test split
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0",
            conflicts_with = "seed"
        )]
        seeds: Vec<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy, ECE, NLL and the reliability table of a checkpoint
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Thresholded accuracy on the test split plus a translated mixture
    OodEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// ECE under input corruptions at severities 0 to 5
    CorruptionEval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact-enumeration checks of the energy-model identities
    TheoryCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Points per side of the square verification grid
        #[arg(long, default_value_t = 21)]
        grid: usize,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Train the energy loss at several weights and tabulate the results
    AblateLambda {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,0.1,0.01")]
        lambdas: Vec<f64>,
    },
    /// Write the configured dataset as CSV
    MakeData {
        #[command(flatten)]
        common: Common,
    },
}

/// Parses `args` (program name first) and runs the command, printing to
/// stdout/stderr. Returns the exit code.
pub fn run<I, T>(args: I, env: &BTreeMap<String, String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command, env) {
        Ok(Outcome::Success) => EXIT_OK,
        Ok(Outcome::ChecksFailed) => EXIT_NUMERICAL,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Numerical failures exit with 2; everything else (configuration, input
/// files) with 1.
pub fn exit_code(e: &eow::Error) -> i32 {
    use eow::Error::*;
    match e {
        NonFinite(_) | LogDomain(_) | SgldDiverged { .. } => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}
