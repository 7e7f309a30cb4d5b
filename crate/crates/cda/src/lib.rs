//! Experiment front end for `cda_core`: IDX files, checkpoints, metrics CSV,
//! TOML configs, run manifests and the `cda` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
mod error;
pub mod idx;
pub mod manifest;
pub mod metrics;

pub use error::{Error, Result};
