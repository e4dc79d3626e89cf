//! Batch front end: simulate data, fit chains, diagnose, summarize and run
//! replicate studies from one JSON config.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{BasisSpec, DataSource, Overrides, RunConfig};
