//! Experiment driver for the `supermarket` crate: JSON configuration,
//! initial-condition specs, trajectory CSV I/O, the mean-square-error rate
//! study and the `supermarket` command line.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod initial;
pub mod io;
pub mod rate;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
