//! Benchmark driver: configuration, metrics and the CLI commands.

mod commands;
mod config;
mod metrics;

pub use commands::{
    checkpoint_file, cmd_collect, cmd_eval, cmd_sweep, cmd_trace, cmd_train, evaluate, format_trend, head_for,
    load_policy, loss_file, make_policy, trend_report, CollectSummary, SweepSummary, TraceSummary, TrainStart,
    TrainSummary, TrendEntry, CONFIG_FILE, DATASET_FILE, METRICS_FILE, SWEEP_DELAYS, SWEEP_FILE, TRACE_FILE,
    TREND_FILE,
};
pub use config::{
    CollectSection, EvalSection, ExecutorSection, PolicySection, RunConfig, SamplerSection, TraceSection,
    TrainSection,
};
pub use metrics::{read_metrics_csv, wilson_interval, write_metrics_csv, MetricsRow, CSV_COLUMNS, Z95};
