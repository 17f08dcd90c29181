//! Counter-based seed derivation.
//!
//! Every random draw in the library comes from a ChaCha stream keyed by a
//! base seed, a purpose tag and a tuple of counters (trial, inference index,
//! ...). Streams never depend on the order in which other streams were used,
//! so paired comparisons across methods see identical randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for; part of the key.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    FlowNoise = 1,
    Unmask = 2,
    TrainMask = 3,
    EnvReset = 4,
    EnvNoise = 5,
    Bid = 6,
    Training = 7,
    Init = 8,
    Expert = 9,
    Shuffle = 10,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed`.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix(seed), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, &[purpose as u64]))
}

pub fn stream_for(seed: u64, purpose: Purpose, parts: &[u64]) -> ChaCha8Rng {
    let mut key = Vec::with_capacity(parts.len() + 1);
    key.push(purpose as u64);
    key.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(derive(seed, &key))
}
