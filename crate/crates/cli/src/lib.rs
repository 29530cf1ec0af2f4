//! Command-line shell around `innlab-core`: config resolution, dataset
//! loaders for the IDX and CIFAR on-disk formats, and the subcommands.

pub mod cifar;
pub mod commands;
pub mod config;
pub mod idx;

pub use commands::{run, Cli, GRADCHECK_TOLERANCE};
pub use config::{DatasetFormat, ExperimentConfig, PRESETS};
