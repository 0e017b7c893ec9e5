//! Experiment configuration, label-fraction sweeps and reporting.

pub mod config;
pub mod report;
pub mod sweep;

pub use config::{ExperimentConfig, Mode, Preset, Timing};
pub use report::{emit_report, summarize, Stat, Summary};
pub use sweep::{
    prepare_data, read_rows, resolve_output_dir, run_single, run_sweep, write_rows, MetricsRow,
    PreparedData, RunKey, RunOutcome, SweepResult,
};
