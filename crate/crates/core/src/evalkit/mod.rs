//! Forecast metrics, naive baselines and causal-graph recovery scores.

mod baselines;
mod forecast;
mod graph;
mod metrics;

pub use baselines::{baseline_historical_average, baseline_persistence, targets};
pub use forecast::{forecast_csv, forecast_split, write_forecast_csv, SplitForecast};
pub use graph::{graph_recovery, GraphRecovery, EDGE_THRESHOLD};
pub use metrics::{error_stats, metrics, MetricReport, ModalityMetrics, DEFAULT_MAPE_THRESHOLD};
