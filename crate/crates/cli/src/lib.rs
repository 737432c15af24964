//! Experiment runner for `gradstack`: config files, training modes,
//! hyper-parameter sweeps, gradient checks and report tables.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod check;
pub mod config;
pub mod error;
pub mod experiment;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Mode, RawConfig};
pub use error::{CliError, Result};
