//! Configuration and subcommands behind the `diagflow` binary.

pub mod commands;
pub mod config;

pub use commands::Outcome;
pub use config::{ExperimentConfig, Overrides, Preset};
