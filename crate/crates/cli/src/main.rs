use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kedmd_cli::bench::{self, BenchOpts};
use kedmd_cli::commands::{self, CertifyOpts, FitOpts, GenerateOpts, SimulateOpts};

/// Kernel EDMD surrogates with MPC on the surrogate.
///
/// Set KEDMD_THREADS to bound the worker pool.
#[derive(Parser)]
#[command(name = "kedmd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample clustered training data around a grid of centers.
    Generate(GenerateOpts),
    /// Fit a surrogate to a dataset.
    Fit(FitOpts),
    /// Run the closed loop with a model in the controller.
    Simulate(SimulateOpts),
    /// Estimate error and growth bounds and check the decrease margin.
    Certify(CertifyOpts),
    /// Run a benchmark suite.
    Bench(BenchOpts),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("KEDMD_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: {e}");
        }
    }
    let result = match &cli.command {
        Command::Generate(o) => commands::generate(o),
        Command::Fit(o) => commands::fit(o),
        Command::Simulate(o) => commands::simulate(o),
        Command::Certify(o) => commands::certify(o),
        Command::Bench(o) => bench::bench(o),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
