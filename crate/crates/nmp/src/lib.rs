//! File formats, dataset generation, metrics export and the command layer
//! for the `nmp` tool, on top of the `nmp-core` simulation and learning core.

pub mod atomic;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod generate;
pub mod manifest;
pub mod mesh_file;
pub mod report;
pub mod timing;
pub mod trajectory_file;

pub use error::{CliError, Result};
