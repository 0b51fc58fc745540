//! Configuration, execution and reporting for weight-update-skipping
//! experiments. The `wus` binary is a thin wrapper around this library.

pub mod compare;
pub mod config;
pub mod error;
pub mod presets;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::CliError;
