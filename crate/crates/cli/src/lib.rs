//! Command-line front end: run configuration, the stage pipeline behind each
//! subcommand, and report emission.

pub mod app;
pub mod config;
pub mod pipeline;
pub mod report;
