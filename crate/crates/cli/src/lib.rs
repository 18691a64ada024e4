//! Command implementations and run configuration for the `diffseg` binary.

pub mod commands;
pub mod config;
