//! Artifact plumbing: checkpoints, config files, reports and the commands
//! the `foura` binary dispatches to.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;

pub use checkpoint::{load_adapters, AdapterSet, Checkpoint, DType, Tensor};
pub use commands::{
    cmd_analyze, cmd_denoise_report, cmd_gradcheck, cmd_merge, cmd_train, AnalyzeArgs, BoundInputs, MergeArgs,
    TrainArgs,
};
pub use config::{parse_config, render_config};
pub use report::{Csv, RunManifest};
