//! Config-driven experiment runner for `nearopt-core`.

pub mod config;
pub mod error;
pub mod plot;
pub mod runner;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use plot::emit_plot_data;
pub use runner::{run_experiment, Outcome, RunOptions};
