//! Command-line workflow around `cellscale-core`: corpus creation, training
//! runs, size sweeps, power-law fits, entropy estimates and reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod plot;
pub mod report;
pub mod sweep;

pub use commands::{run, Cli};
pub use error::{CliError, Result};
