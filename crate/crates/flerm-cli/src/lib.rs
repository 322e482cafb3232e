//! Experiment harness: reproducible sweeps over (scale, eta0, seed) cells,
//! base-schedule recording, and summary tables for transfer plots.

pub mod config;
pub mod runner;
pub mod summary;

pub use config::{DatasetSpec, ExperimentConfig, LrSchedule, OptimizerSpec, RunMode, ScaleAxis};
pub use runner::{read_results, record_base, run, write_results, ResultRow};
pub use summary::{summarize, write_summary, SummaryRow};
