//! `hepeval`: evaluation, phantom generation, loss checks and vessel
//! analysis from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 when some cases
//! of a batch failed.

mod args;
mod commands;
mod config;
mod failure;
mod io;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HEPEVAL_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match &cli.command {
        Command::Eval(a) => commands::eval::run(&cli.global, a),
        Command::Phantom(a) => commands::phantom::run(&cli.global, a),
        Command::Loss(a) => commands::loss::run(&cli.global, a),
        Command::Skeleton(a) => commands::skeleton::run(&cli.global, a),
        Command::Stats(a) => commands::stats::run(&cli.global, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
