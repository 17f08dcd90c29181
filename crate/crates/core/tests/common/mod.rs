#![allow(dead_code)]

use chunk_lab::math::Tensor;
use chunk_lab::net::{Head, MixerConfig, PolicyParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Small enough for exhaustive finite differences.
pub fn tiny_config(head: Head) -> MixerConfig {
    MixerConfig {
        chunk_len: 4,
        action_dim: 2,
        obs_dim: 3,
        channel_dim: 6,
        token_hidden: 5,
        channel_hidden: 7,
        num_blocks: 2,
        head,
        num_bins: 5,
        bin_embed_dim: 3,
    }
}

/// Initialised params with every tensor perturbed, so zero-init gates and
/// heads do not hide gradient paths.
pub fn randomized_params(cfg: &MixerConfig, seed: u64) -> PolicyParams {
    let mut p = PolicyParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    p.update(|_, t| {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
        Ok(())
    })
    .unwrap();
    p
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// H=8, A=2 network small enough for quick sampler tests.
pub fn small_config(head: Head) -> MixerConfig {
    MixerConfig {
        chunk_len: 8,
        action_dim: 2,
        obs_dim: 6,
        channel_dim: 16,
        token_hidden: 8,
        channel_hidden: 16,
        num_blocks: 1,
        head,
        num_bins: 32,
        bin_embed_dim: 4,
    }
}

/// [`small_config`] sized for the environment observations.
pub fn env_config(head: Head) -> MixerConfig {
    MixerConfig {
        obs_dim: chunk_lab::envs::OBS_DIM,
        ..small_config(head)
    }
}
