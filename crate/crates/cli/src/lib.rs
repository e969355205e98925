//! Command-line front end: JSON run configuration, dataset loading and the
//! `compress`, `train`, `eval`, `gradcheck` and `tau-stats` commands.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
