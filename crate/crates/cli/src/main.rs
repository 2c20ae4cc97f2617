//! `lutnet`: train, compile, run, evaluate, sweep and inspect table networks.
//!
//! CSV and summaries go to stdout, logs to stderr. Exit codes: 0 success,
//! 1 usage or configuration error, 2 data error, 3 capacity error.

mod commands;
mod plan_args;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CompileArgs, EvalArgs, InspectArgs, RunArgs, SweepArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(name = "lutnet", version, about = "Look-up-table compiler and multiplier-free inference engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the linear classifier on MNIST or Fashion-MNIST.
    Train(TrainArgs),
    /// Compile a weight container into a plan (or cost it).
    Compile(CompileArgs),
    /// Run a plan on one input.
    Run(RunArgs),
    /// Measure accuracy through the plan, the oracle or the float reference.
    Eval(EvalArgs),
    /// Cost a grid of partition configurations.
    Sweep(SweepArgs),
    /// Describe a container or plan, or print the effective configuration.
    Inspect(InspectArgs),
}

/// Usage problems detected after argument parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use lutnet::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Capacity(_) => 3,
                E::Config(_) | E::Compile(_) => 1,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Compile(a) => commands::compile(a),
        Command::Run(a) => commands::run(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Inspect(a) => commands::inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
