//! `poet`: synthetic data generation, continual training runs, checkpoint
//! evaluation and run reports.

mod config;
mod error;
mod eval;
mod gen_data;
mod logs;
mod report;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Few-shot class-incremental skeleton action recognition with prompt offsets.
#[derive(Debug, Parser)]
#[command(name = "poet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic benchmark as skeleton files plus dataset and protocol descriptions.
    GenData(gen_data::GenDataArgs),
    /// Run the base session and every incremental session for each configured seed.
    Train(train::TrainArgs),
    /// Evaluate a checkpoint on the test clips of its seen classes.
    Eval(eval::EvalArgs),
    /// Metric tables, prompt order matrices and usage statistics of finished runs.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => gen_data::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
