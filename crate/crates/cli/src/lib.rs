//! Command-line front end of the `posbias` laboratory: flat configuration,
//! the end-to-end pipeline and plot-data emission. The `posbias` binary is a
//! thin clap layer over these modules.

pub mod config;
pub mod pipeline;
pub mod plots;

pub use config::{ConfigArgs, ExperimentConfig, RunKind};
pub use pipeline::{run_pipeline, RunMetrics};
pub use plots::emit_plot_data;
