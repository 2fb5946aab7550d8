//! Command implementations and benchmark harness behind the `chronorag` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod forecast;
pub mod synth;
