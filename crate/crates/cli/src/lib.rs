//! Config-driven experiment pipeline: data generation, detector training,
//! patch optimization, evaluation, transfer, and reporting.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::*;
pub use config::{ArchChoice, Experiment, ExperimentConfig, Translation};
pub use error::{exit, CliError, CliResult};
