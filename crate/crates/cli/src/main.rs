//! `prn`: synthetic data, training, evaluation and scoring.
//!
//! Exit status is 0 on success, 1 on usage errors and 2 on runtime errors.

mod args;
mod commands;
mod overrides;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, SynthCommand};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let result = match &cli.command {
        Command::Synth { what: SynthCommand::Dataset(a) } => commands::synth_dataset(a),
        Command::Synth { what: SynthCommand::Anomalies(a) } => commands::synth_anomalies(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Score(a) => commands::score_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
