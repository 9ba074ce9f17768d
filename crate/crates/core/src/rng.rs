//! Seed derivation and deterministic RNG construction.
//!
//! Every random draw in the toolkit flows through a ChaCha stream whose
//! seed is derived from a base seed plus a purpose tag, so independent
//! consumers (initialization, batch shuffling, noise synthesis, MIA
//! folds) never share or perturb each other's streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mix a base seed with a purpose tag into a new 64-bit seed.
///
/// FNV-1a over the tag bytes folded with the base seed, finished with a
/// splitmix64 round. Stable across platforms and releases.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for &b in tag.as_bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

/// Derive a seed that also depends on an index (epoch, fold, cell).
pub fn derive_seed_indexed(base: u64, tag: &str, index: u64) -> u64 {
    splitmix64(derive_seed(base, tag) ^ splitmix64(index.wrapping_add(0x9e37_79b9)))
}

/// Deterministic RNG for a (seed, tag) pair.
pub fn rng_for(base: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag))
}

/// Deterministic RNG for a (seed, tag, index) triple.
pub fn rng_for_indexed(base: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed_indexed(base, tag, index))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
