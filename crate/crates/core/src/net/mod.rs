//! Mixer policy backbone with a velocity or logits head.

mod checkpoint;
mod config;
mod mixer;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{Head, MixerConfig};
pub use mixer::{flow_forward, logits_forward};
pub use params::{BoundParams, PolicyParams};
