//! `ctpp` command-line tool.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

/// Failure classes and their exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Exit 1: a verification command found a problem.
    #[error("{0}")]
    Check(String),
    /// Exit 2: bad arguments, config or input data.
    #[error("{0}")]
    Usage(String),
    /// Exit 3: training produced non-finite values.
    #[error("{0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Diverged(_) => 3,
        }
    }
}

impl From<ctpp::Error> for CliError {
    fn from(e: ctpp::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
