//! `physe-inv`: synthesize data, train, evaluate, run ablations, check
//! gradients and demonstrate the hydrostatic relations.

mod args;
mod commands;
mod physics_cmd;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Failure classes and their exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let out_dir = cli.out_dir.as_deref();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a, out_dir),
        Command::Train(a) => commands::train(&a, out_dir),
        Command::Eval(a) => commands::eval(&a, out_dir),
        Command::Ablate(a) => commands::ablate(&a, out_dir),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Physics(a) => physics_cmd::run(&a, out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
