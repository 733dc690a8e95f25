//! `soir`: simulate, fit, cross-validate, predict, evaluate and diagnose
//! noise-corrected multi-task scalar-on-image models.

mod diagnose;
mod error;
mod fit;
mod noise;
mod output;
mod simulate;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "soir", version, about = "Noise-corrected multi-task scalar-on-image regression")]
pub struct Cli {
    /// JSON config for the subcommand. A `manifest.json` from an earlier run
    /// is accepted too and replays that run.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Seed for every random choice (simulation, folds, power iteration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the simulation protocol and write per-replicate metrics.
    Simulate(simulate::SimulateArgs),
    /// Fit one penalized model, choosing lambda by cross-validation unless
    /// `--lambda` is given.
    Fit(fit::FitArgs),
    /// Cross-validate over the lambda grid and refit at the selected value.
    Cv(fit::FitArgs),
    /// Predict outcomes for a dataset from a saved fit.
    Predict(fit::PredictArgs),
    /// Score a saved fit on a dataset, optionally against true coefficients.
    Evaluate(fit::EvaluateArgs),
    /// Estimate the image noise covariance from replicate or pure-noise scans.
    EstimateNoise(noise::EstimateNoiseArgs),
    /// Curvature, deviation, error-bound and convergence diagnostics.
    Diagnose(diagnose::DiagnoseArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    let global = output::Global {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
    };
    match cli.command {
        Command::Simulate(a) => simulate::run(&global, a),
        Command::Fit(a) => fit::run_fit(&global, a, false),
        Command::Cv(a) => fit::run_fit(&global, a, true),
        Command::Predict(a) => fit::run_predict(&global, a),
        Command::Evaluate(a) => fit::run_evaluate(&global, a),
        Command::EstimateNoise(a) => noise::run(&global, a),
        Command::Diagnose(a) => diagnose::run(&global, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            ExitCode::from(e.exit_code())
        }
    }
}
