//! Library side of the `hydrodeep` command-line tool: run configuration,
//! subcommands and argument parsing.

pub mod app;
pub mod commands;
pub mod config;
