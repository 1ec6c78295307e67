//! Preset experiment grid, run directories, and result reports.

pub mod metrics;
pub mod presets;
pub mod report;
pub mod runner;

pub use presets::{
    extended_range_preset, grokking_preset, preset, presets, ExperimentPreset, ModelSize, Regularization,
};
pub use report::{report, Report};
pub use runner::{run_experiment, RunSummary};
