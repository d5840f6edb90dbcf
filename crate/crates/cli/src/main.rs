mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command};

/// Failures, mapped onto sysexits-style codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or values (64).
    Usage(String),
    /// Malformed or illegal input data, such as a script the daemon rejects (65).
    Data(String),
    /// A named input does not exist (66).
    NoInput(String),
    Internal(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 64,
            CliError::Data(_) => 65,
            CliError::NoInput(_) => 66,
            CliError::Internal(_) => 70,
            CliError::Io(_) => 74,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::NoInput(m) | CliError::Internal(m) | CliError::Io(m) => m,
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("UNISON_LAB_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Usage(format!("UNISON_LAB_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Internal(e.to_string()))
}

fn dispatch() -> Result<u8, CliError> {
    configure_threads()?;
    let argv = args::expand_config(std::env::args_os().collect())?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(0);
        }
        Err(e) => {
            eprint!("{e}");
            return Ok(64);
        }
    };
    match &cli.command {
        Command::Run(a) => commands::cmd_run(a),
        Command::Check(a) => commands::cmd_check(a),
        Command::Scenario(a) => commands::cmd_scenario(a),
        Command::Plotdata(a) => commands::cmd_plotdata(a),
    }
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("unison-lab: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
