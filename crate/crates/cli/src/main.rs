//! `dhs-ensemble`: data collection, expert training and closed-loop
//! experiments from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dhs_ensemble::harness::Controller;
use dhs_ensemble::plant::Regime;
use dhs_ensemble::Error;

/// Overrides the output directory of `run`, `compare` and `mpc-step`.
pub const OUT_DIR_ENV: &str = "DHS_ENSEMBLE_OUT";

#[derive(Debug, Parser)]
#[command(name = "dhs-ensemble", version, about = "Ensemble MPC with Mahalanobis weighting and MHE for a two-regime heating plant")]
struct Cli {
    /// Seed for every random draw (data, training, scenario).
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate identification data of one regime.
    Collect {
        /// Plant parameters (JSON); defaults if omitted.
        #[arg(long)]
        plant: Option<PathBuf>,
        #[arg(long)]
        regime: Regime,
        #[arg(long, default_value_t = 7.0)]
        days: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one GRU expert on a dataset CSV.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Training config (JSON); defaults if omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss history CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Fit the input benchmark (mean, covariance) of a dataset CSV.
    FitBenchmark {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Absolute covariance regularization; relative default if omitted.
        #[arg(long)]
        regularization: Option<f64>,
    },
    /// One closed-loop run.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the controller of the config (`rb`, `av`, `ls`, `md1`, `md2`).
        #[arg(long)]
        strategy: Option<Controller>,
    },
    /// Closed-loop runs of several controllers on a shared scenario and ensemble.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "rb,av,ls,md1,md2")]
        strategies: Vec<Controller>,
    },
    /// A single MPC solve, printed as JSON.
    MpcStep {
        /// Ensemble manifest.
        #[arg(long)]
        ensemble: PathBuf,
        /// Per-expert states and the previous input (JSON).
        #[arg(long)]
        state: PathBuf,
        /// Scenario file supplying the forecast; the seeded default if omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        step: usize,
        #[arg(long, default_value = "md2")]
        strategy: dhs_ensemble::ensemble::Strategy,
        /// MPC config (JSON); defaults if omitted.
        #[arg(long)]
        mpc: Option<PathBuf>,
        /// Directory for the solution and the iteration log.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

/// Exit codes by failure category.
const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_IO: u8 = 4;

fn exit_code(err: &anyhow::Error) -> u8 {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<Error>()) else {
        return EXIT_OTHER;
    };
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::DimensionMismatch { .. } | Error::DegenerateBenchmark { .. } => {
            EXIT_CONFIG
        }
        Error::Solver(_) | Error::Divergence { .. } => EXIT_SOLVER,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::dispatch(cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn error_categories() {
        let wrap = |e: Error| Err::<(), _>(e).context("while testing").unwrap_err();
        assert_eq!(exit_code(&wrap(Error::Config("x".into()))), EXIT_CONFIG);
        assert_eq!(exit_code(&wrap(Error::Solver("x".into()))), EXIT_SOLVER);
        assert_eq!(exit_code(&wrap(Error::Divergence { epoch: 3 })), EXIT_SOLVER);
        let io = Error::io("f.csv", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(exit_code(&wrap(io)), EXIT_IO);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_OTHER);
    }
}
