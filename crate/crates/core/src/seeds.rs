//! Deterministic RNG stream derivation.
//!
//! Every random consumer derives its own ChaCha stream from (base seed, tag,
//! index), so runs are reproducible and resuming at an epoch boundary
//! recreates the exact stream without serializing generator state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_PARAM_INIT: u64 = 1;
pub const TAG_EPOCH: u64 = 2;
pub const TAG_SHUFFLE: u64 = 3;
pub const TAG_BASELINE: u64 = 4;
pub const TAG_PROBE: u64 = 5;

pub fn stream(base: u64, tag: u64, idx: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[0..8].copy_from_slice(&base.to_le_bytes());
    seed[8..16].copy_from_slice(&tag.to_le_bytes());
    seed[16..24].copy_from_slice(&idx.to_le_bytes());
    seed[24..32].copy_from_slice(&0x9e3779b97f4a7c15u64.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}
