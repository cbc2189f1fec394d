//! Experiment harness around `trsbts-core`: JSON configs, the fit /
//! generate / validate commands, the dimension sweep, the hyperparameter
//! ladder, the Heston recovery run and reference selection.

pub mod commands;
pub mod config;
pub mod error;
pub mod heston;
pub mod io;
pub mod ladder;
pub mod select;
pub mod sweep;

pub use config::ExperimentConfig;
pub use error::{CliError, Kind, Result};
