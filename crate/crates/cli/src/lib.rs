//! Command-line orchestration of the kernel EDMD MPC experiments.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod svg;

pub use error::{CliError, CliResult};
