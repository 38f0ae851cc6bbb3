//! `pseudocal` command-line tool.
//!
//! Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage errors.

mod eval;
mod fit;
mod simulate;
mod sparsify;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "pseudocal", version, about = "Calibrated pseudo-labeling for sparse object annotations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Delete annotations from a COCO file under a sparse-annotation protocol.
    Sparsify(sparsify::Args),
    /// Run the pseudo-labeling loop on simulated detections.
    Simulate(simulate::Args),
    /// Reliability and pseudo-label metrics for a prediction file.
    Eval(eval::Args),
    /// Fit calibrator parameters from a `p_hat,m` sample file.
    FitCalibrator(fit::Args),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap reports usage errors with status 2 and help/version with 0
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Sparsify(args) => sparsify::run(&args),
        Command::Simulate(args) => simulate::run(&args),
        Command::Eval(args) => eval::run(&args),
        Command::FitCalibrator(args) => fit::run(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
