//! Host-side companion to `fedsim-core`: configuration, dataset files,
//! the experiment runner and the `fedsim` command line.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod report;
pub mod runner;

pub use config::{ExperimentConfig, Method};
pub use error::{FedsimError, Result};
pub use runner::{
    load_data, run_experiment, run_with_data, DataBundle, RoundRecord, RunOptions, RunOutput,
};
