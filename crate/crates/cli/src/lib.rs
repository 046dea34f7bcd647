//! Command-line harness for quantnet: synthetic data generation, training,
//! evaluation and reporting.

pub mod artifact;
pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod synth;

pub use cli::{run, Cli};
pub use error::{CliError, Result};
