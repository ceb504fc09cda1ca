//! Command-line experiment runner: corpus generation, cohort construction,
//! pretraining, the three training regimes, evaluation and the imbalance and
//! few-shot sweeps. Every output carries the configuration hash and seed.

pub mod commands;
pub mod config;
pub mod error;
pub mod provenance;

pub use commands::{run, Cli};
pub use config::RunConfig;
pub use error::CliError;
