//! Stable seed derivation.
//!
//! Every random draw in the crate comes from a ChaCha8 stream whose seed is
//! derived from the master seed and a fixed path of indices, so results do
//! not depend on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a stream label.
pub fn mix(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label.wrapping_mul(GOLDEN).wrapping_add(1)))
}

/// Seed for tree `q` of layer `layer`.
pub fn tree_seed(master: u64, layer: usize, q: usize) -> u64 {
    mix(mix(master, layer as u64), q as u64)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// Stream labels for the stages of a single honest tree fit.
pub const STREAM_SUBSAMPLE: u64 = 1;
pub const STREAM_SPLIT: u64 = 2;
pub const STREAM_FIT: u64 = 3;
pub const STREAM_PRUNE: u64 = 4;
