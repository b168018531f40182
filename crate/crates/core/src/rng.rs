//! Seed plumbing. Every random stream in the crate is a ChaCha8 generator
//! keyed by an explicit seed and a stream tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags keep independent consumers from sharing a generator.
pub mod stream {
    pub const DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const CLASSIFIER_INIT: u64 = 4;
    pub const ALPHA_INIT: u64 = 5;
    pub const BETA_INIT: u64 = 6;
    pub const TRAIN_SAMPLER: u64 = 7;
    pub const META_SAMPLER: u64 = 8;
    pub const FINETUNE_SAMPLER: u64 = 9;
}

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tag: u64) -> u64 {
    mix(mix(seed) ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn rng_for(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tag))
}

/// Generator for one epoch (or cycle) of a sampler stream.
pub fn rng_for_epoch(seed: u64, tag: u64, epoch: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(derive(seed, tag), epoch))
}
