//! Command-line pipeline around the `fpsurrogate` library: feeder and
//! dataset generation, training, evaluation, and one-shot experiments.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use commands::{exit_code, run, Cli};
pub use config::{ExperimentConfig, FeederSource};
pub use pipeline::{run_experiment, ExperimentOutcome};
