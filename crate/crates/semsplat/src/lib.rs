//! Files, checkpoints and the command-line front end for `semsplat-core`.

pub use semsplat_core as core;

pub mod checkpoint;
pub mod cli;
pub mod colmap;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod pfm;
pub mod png;
pub mod vis;

pub use error::{IoError, Result};
