//! Seed derivation. Every random stream in the crate is a ChaCha8 stream
//! keyed by the run seed plus a purpose tag, so streams never depend on how
//! much randomness an earlier stage consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, parts))
}

/// Purpose tags for [`stream`].
pub mod tag {
    pub const INIT: u64 = 1;
    pub const HEADS: u64 = 2;
    pub const SAMPLER: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const SYNTH: u64 = 5;
}
