//! Library side of the `restore` binary: run configuration, subcommands and
//! the gradient-check suites.

pub mod checks;
pub mod commands;
pub mod config;
