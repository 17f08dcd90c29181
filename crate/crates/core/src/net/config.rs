use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output head of the mixer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Velocity field over the chunk (flow policy).
    Velocity,
    /// Per-token logits over bins (discrete policy).
    Logits,
}

/// Shape of the mixer backbone and its head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixerConfig {
    pub chunk_len: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub channel_dim: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub num_blocks: usize,
    pub head: Head,
    /// Bins per action dimension (logits head only).
    #[serde(default = "default_bins")]
    pub num_bins: usize,
    /// Width of each bin embedding (logits head only).
    #[serde(default = "default_bin_embed")]
    pub bin_embed_dim: usize,
}

fn default_bins() -> usize {
    512
}

fn default_bin_embed() -> usize {
    128
}

impl MixerConfig {
    /// Full-size backbone: H=8, 256 channels, token hidden 64, channel
    /// hidden 512, 4 blocks, 512 bins embedded in 128 dims.
    pub fn reference(head: Head, obs_dim: usize, action_dim: usize) -> Self {
        MixerConfig {
            chunk_len: 8,
            action_dim,
            obs_dim,
            channel_dim: 256,
            token_hidden: 64,
            channel_hidden: 512,
            num_blocks: 4,
            head,
            num_bins: default_bins(),
            bin_embed_dim: default_bin_embed(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_len < 2 {
            return Err(Error::config("policy.chunk_len", "must be at least 2"));
        }
        let dims = [
            ("policy.action_dim", self.action_dim),
            ("policy.obs_dim", self.obs_dim),
            ("policy.token_hidden", self.token_hidden),
            ("policy.channel_hidden", self.channel_hidden),
            ("policy.num_blocks", self.num_blocks),
        ];
        for (field, v) in dims {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.channel_dim < 2 {
            return Err(Error::config("policy.channel_dim", "must be at least 2"));
        }
        if self.head == Head::Logits {
            if self.num_bins < 2 {
                return Err(Error::config("policy.num_bins", "logits head needs at least 2 bins"));
            }
            if self.bin_embed_dim == 0 {
                return Err(Error::config("policy.bin_embed_dim", "must be positive"));
            }
        }
        Ok(())
    }

    /// Channels carrying the action (or bin-embedding) features.
    pub fn action_channels(&self) -> usize {
        self.channel_dim / 2
    }

    /// Channels carrying the observation embedding.
    pub fn obs_channels(&self) -> usize {
        self.channel_dim - self.action_channels()
    }
}
