//! Experiment harness for the trendskip sampler: TOML configs, seeded runs
//! against full-step references, tolerance search with caching, sweeps, trace
//! analysis, and the `trendskip` command line.

pub mod commands;
pub mod config;
pub mod error;
pub mod experiment;
pub mod specs;

pub use config::{parse_config, ExperimentConfig, SigmaSetting};
pub use error::{CliError, CliResult};
pub use experiment::{run_experiment, run_sweep, Context, SummaryRow};
