//! Command-line harness: configuration, experiment orchestration, run
//! manifests and the `tssep` subcommands.

pub mod config;
pub mod experiment;
pub mod commands;
pub mod manifest;

pub use commands::run;
