//! Seed derivation. Every stochastic routine pulls its generator from a
//! `(seed, tags...)` stream so results never depend on call order or on how
//! work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of tags into a derived seed.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &t in tags {
        h = splitmix64(h ^ splitmix64(t.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    h
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}

// Stream tags used across modules.
pub(crate) const TAG_INIT: u64 = 1;
pub(crate) const TAG_DROPOUT: u64 = 2;
pub(crate) const TAG_EG: u64 = 3;
pub(crate) const TAG_EG_TRAIN: u64 = 4;
pub(crate) const TAG_SHUFFLE: u64 = 5;
pub(crate) const TAG_RANDOM_ATTR: u64 = 6;
pub(crate) const TAG_DATA: u64 = 7;
pub(crate) const TAG_NOISE: u64 = 8;
pub(crate) const TAG_SPLIT: u64 = 9;
pub(crate) const TAG_RESAMPLE: u64 = 10;
pub(crate) const TAG_GRAPH: u64 = 11;
pub(crate) const TAG_REPLICATE: u64 = 12;
