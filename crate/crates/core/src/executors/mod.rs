//! Who executes what at every controller step while inference runs.
//!
//! Time is counted in controller steps. The bootstrap chunk is ready before
//! step 0; afterwards a request issued at step `t` resolves at `t + d`.

mod config;
mod engine;
mod ops;

pub use config::{ExecutorConfig, Method, PauseAction};
pub use engine::{
    format_timeline, run_rollouts, step_batch, DiscretePolicy, ExecStats, Executed, Executor, FlowPolicy, Plan,
    Policy, RolloutReport, RolloutSpec, Source, TimelineEntry, TrialResult,
};
pub use ops::{bid_loss, bid_select, commit_prefix, commit_prefix_tokens, jerk_metric, temporal_ensemble_combine};
