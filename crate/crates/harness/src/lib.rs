//! Experiment runner: TOML run configs, run directories and the `dkmap`
//! command surface.

pub mod commands;
pub mod config;
pub mod error;
pub mod rundir;
pub mod selftest;

pub use error::{HarnessError, Result};
