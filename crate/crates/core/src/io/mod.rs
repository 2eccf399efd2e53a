//! Run configuration, dataset loaders and metric files.

mod config;
mod data;
mod metrics;

pub use config::{Command, DatasetConfig, DatasetFormat, ManifoldConfig, Overrides, Policy, RunConfig};
pub use data::{load_dataset, synthetic_bars, Dataset, Loader};
pub use metrics::{ascii_plot, emit_metrics, svg_plot, MetricRow, RunMetrics, CSV_HEADER};
