//! Seed derivation. Every random stream in the crate is a ChaCha8 generator
//! keyed by a 64-bit value derived from the user seed and a stream path, so
//! results never depend on call order or scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a sequence of stream indices.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix64(seed), |acc, &p| mix64(acc ^ mix64(p)))
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    rng_from(derive(seed, path))
}

// Stream tags, kept distinct so that independent consumers never share draws.
pub const TAG_HEIGHT: u64 = 0x4845_4947;
pub const TAG_MOISTURE: u64 = 0x4d4f_4953;
pub const TAG_SAMPLER: u64 = 0x5341_4d50;
pub const TAG_LABEL: u64 = 0x4c41_4245;
pub const TAG_SPLIT: u64 = 0x5350_4c54;
pub const TAG_SHUFFLE: u64 = 0x5348_5546;
pub const TAG_DROPOUT: u64 = 0x4452_4f50;
pub const TAG_INIT: u64 = 0x494e_4954;
