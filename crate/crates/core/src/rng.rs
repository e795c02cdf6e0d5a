//! Seed derivation.
//!
//! Every random stream in a run is keyed by the run seed plus a purpose tag
//! and up to three counters, so a stream never depends on how many draws
//! another stream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_INIT: u64 = 1;
pub const TAG_SHUFFLE_PRETRAIN: u64 = 2;
pub const TAG_KMEANS: u64 = 3;
pub const TAG_SHUFFLE_TRAIN: u64 = 4;
pub const TAG_COHORT: u64 = 5;
pub const TAG_FINETUNE: u64 = 6;
pub const TAG_SPLIT: u64 = 7;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with a tag and counters into an independent 64-bit seed.
pub fn derive_seed(seed: u64, tag: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut h = splitmix64(seed ^ 0x5EED_0000_0000_0000);
    for v in [tag, a, b, c] {
        h = splitmix64(h ^ v);
    }
    h
}

pub fn rng_for(seed: u64, tag: u64, a: u64, b: u64, c: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, a, b, c))
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
