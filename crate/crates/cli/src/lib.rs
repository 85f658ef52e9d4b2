//! Command-line pipeline around `episeg`: dataset generation, training,
//! MC-dropout inference, post-processing, evaluation, sweeps and reports.

pub mod commands;
pub mod config;
pub mod failure;
pub mod provenance;
pub mod report;

pub use config::RunConfig;
pub use failure::{CmdResult, Failure};
