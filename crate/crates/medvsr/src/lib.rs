//! File formats, run configuration and command implementations around `medvsr-core`.

pub mod cli;
pub mod commands;
pub mod config;
mod error;
pub mod io;
pub mod report;

pub use error::{CliError, Result};
