//! `fedfair`: prepare data, train, sweep and verify.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 runtime or training error.

mod config;
mod exit;
mod layout;
mod manifest;
mod prepare;
mod sweep;
mod train;
mod verify;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use exit::{CmdResult, ExitKind};

#[derive(Debug, Parser)]
#[command(name = "fedfair", version, about = "Fairness-aware private federated GNN recommender simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Filter, split and group a raw dataset.
    Prepare(prepare::PrepareArgs),
    /// Run one federated training experiment.
    Train(train::TrainArgs),
    /// Run a β sweep or an LDP (δ, λ) grid.
    Sweep(sweep::SweepArgs),
    /// Run the gradient, expansion, noise, n-core and group-statistics suites.
    Verify(verify::VerifyArgs),
}

fn dispatch(cli: &Cli) -> CmdResult {
    match &cli.command {
        Command::Prepare(a) => prepare::run(a),
        Command::Train(a) => train::run(a),
        Command::Sweep(a) => sweep::run(a),
        Command::Verify(a) => verify::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitKind::Usage.into()
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            f.kind.into()
        }
    }
}
