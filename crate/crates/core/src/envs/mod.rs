//! Desk-scale control tasks with scripted experts and demonstration files.

mod dataset;
mod sim;

pub use dataset::{hex_digest, Dataset, DatasetHeader, DATASET_VERSION};
pub use sim::{
    expert_episode, throughput, EnvConfig, EnvKind, EnvState, EpisodeStats, ExpertGains, ForkGeometry,
    StepOutcome, ACTION_DIM, FRAME_DIM, HISTORY, OBS_DIM, THROUGHPUT_WINDOW,
};
