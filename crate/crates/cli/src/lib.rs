//! Experiment runner for terrafuse: configuration, the single-stage commands,
//! the resumable objective × encoder grid, and report emission.

pub mod commands;
pub mod config;
pub mod grid;
pub mod report;

pub use commands::{cmd_evaluate, cmd_finetune, cmd_pretrain, cmd_synth, Workspace};
pub use config::{ExperimentConfig, RESOLVED_CONFIG_FILE};
pub use grid::{cmd_grid, GridSummary};
pub use report::cmd_report;
