//! Seed derivation. Every random draw in the pipeline comes from a ChaCha
//! stream keyed by a base seed and a tuple of integer tags.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(base ^ 0x6A09_E667_F3BC_C908), |acc, &t| {
        mix(acc.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(mix(t)))
    })
}

pub fn stream(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

// Stream tags, kept distinct so no two consumers share a stream.
pub(crate) const TAG_ENCODER_INIT: u64 = 1;
pub(crate) const TAG_MEMORY_INIT: u64 = 2;
pub(crate) const TAG_SHUFFLE: u64 = 3;
pub(crate) const TAG_POSITIONS: u64 = 4;
pub(crate) const TAG_HEAD_INIT: u64 = 5;
pub(crate) const TAG_STAGE2_SHUFFLE: u64 = 6;
pub(crate) const TAG_AUGMENT: u64 = 7;
pub(crate) const TAG_SPLIT: u64 = 8;
pub(crate) const TAG_PROBE: u64 = 9;
