//! Training harness for BackEISNN spiking networks: configuration,
//! checkpoints, metrics and the `train`, `eval`, `ablate`, `gradcheck` and
//! `sweep` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
mod error;
pub mod metrics;
pub mod train;

pub use config::RunConfig;
pub use error::CliError;
