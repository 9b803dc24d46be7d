//! Experiment driver: configuration files, commands and result files.

pub mod commands;
pub mod config;
pub mod output;

use thiserror::Error;

pub use commands::{cmd_calibrate, cmd_capacity, cmd_simulate, cmd_sweep, CapacityRow, CommandOptions, SweepResult, SweepRow};
pub use config::ExperimentConfig;

pub const EXIT_OK: u8 = 0;
pub const EXIT_INFEASIBLE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Sim(#[from] batchsim::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Sim(batchsim::Error::InfeasibleSlo(_)) => EXIT_INFEASIBLE,
            _ => EXIT_CONFIG,
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(std::io::Error::other(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(std::io::Error::other(e))
    }
}
