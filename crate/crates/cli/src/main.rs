//! `ebgmcr`: synthesize mixture datasets, resolve them, benchmark against
//! fixed-rank baselines and summarize the results.

mod bench;
mod config;
mod manifest;
mod report;
mod solve;
mod svg;
mod synth;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Exit code for a training run aborted by a non-finite loss.
const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "ebgmcr", version, about = "Energy-gated multivariate curve resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic mixture dataset with ground truth.
    Synth(synth::SynthArgs),
    /// Resolve a dataset and write the banded checkpoints and training report.
    Solve(solve::SolveArgs),
    /// Run seeded replicates of one method and append run records.
    Bench(bench::BenchArgs),
    /// Aggregate run records into a summary table or figure.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => synth::run(args),
        Command::Solve(args) => solve::run(args),
        Command::Bench(args) => bench::run(args),
        Command::Report(args) => report::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<solve::Diverged>().is_some() {
                ExitCode::from(EXIT_DIVERGED)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
