//! The `amc` command line: script parsing, benchmark building, training,
//! evaluation and the guessing-game server.

pub mod cli;
pub mod commands;
pub mod server;

use std::path::PathBuf;

pub use cli::{Cli, Command};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad arguments or unusable input; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// Anything else; exit code 1.
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl From<amc_core::Error> for CliError {
    fn from(e: amc_core::Error) -> Self {
        use amc_core::Error as E;
        match e {
            E::Tensor(_) | E::MissingClassInSupport { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub const DEFAULT_DATA_DIR: &str = "amc-data";

/// `AMC_DATA_DIR`, or `./amc-data`.
pub fn data_root(flag: Option<PathBuf>) -> PathBuf {
    flag.unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR))
}

pub fn run(cli: Cli) -> CliResult<()> {
    let root = data_root(cli.data_dir);
    match cli.command {
        Command::Parse(a) => commands::parse(&a),
        Command::Build(a) => commands::build(&a, &root),
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a, &root),
        Command::Eval(a) => commands::eval(&a, &root),
        Command::Serve(a) => server::serve(&a, &root),
    }
}
