//! Seed derivation. Every stochastic choice is a pure function of a root
//! seed and a few counters, so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a root seed together with an ordered list of counters.
pub fn derive(seed: u64, counters: &[u64]) -> u64 {
    counters.iter().fold(mix64(seed), |h, &c| mix64(h ^ mix64(c)))
}

/// Uniform sample in `[0, 1)` from the top 53 bits of a hash.
#[inline]
pub fn unit(hash: u64) -> f64 {
    (hash >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn chacha(seed: u64, counters: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, counters))
}
