//! Seed derivation for independent trials.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used by every randomized operation.
pub type SpRng = ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> SpRng {
    SpRng::seed_from_u64(seed)
}

// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a base seed and a path of indices. Stable across
/// platforms and releases.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(base), |acc, &p| mix(acc ^ mix(p)))
}
