//! `dfab`: generate data, train, predict, evaluate and inspect piecewise
//! sparse linear models.

mod args;
mod commands;
mod failure;
mod inspect;
mod manifest;
mod prepare;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).format_timestamp_millis().init();
    let result = match &cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Evaluate(a) => commands::evaluate_cmd(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Worker(a) => commands::worker(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
