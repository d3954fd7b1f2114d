//! `birkhoff-lab`: generate, check and benchmark doubly stochastic mixers.
//!
//! Exit codes: 0 success, 1 a tolerance failed, 2 bad usage or input.

mod args;
mod commands;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;

#[derive(Parser, Debug)]
#[command(name = "birkhoff-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build one mixer matrix and write it as JSON.
    Gen(GenArgs),
    /// Check margins, and optionally the TBP round trip, of a matrix file.
    Verify(VerifyArgs),
    /// Eigenvalues and gaps of a matrix file.
    Spectral(SpectralArgs),
    /// Multiply seeded mixers and trace the product's margin drift as CSV.
    Compose(ComposeArgs),
    /// Find Sinkhorn logits that miss their margins and contrast with TBP.
    #[command(name = "compare-sk")]
    CompareSk(CompareArgs),
    /// Free parameters counted by the recursive chart.
    #[command(name = "count-params")]
    CountParams(CountArgs),
    /// Throughput of batched mixer construction.
    Bench(BenchArgs),
    /// Depth sweep of hyper-connection layers as CSV.
    Sweep(SweepArgs),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::Verify(a) => verify(a),
        Command::Spectral(a) => spectral(a),
        Command::Compose(a) => compose(a),
        Command::CompareSk(a) => compare_sk(a),
        Command::CountParams(a) => count(a),
        Command::Bench(a) => bench(a),
        Command::Sweep(a) => sweep(a),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
