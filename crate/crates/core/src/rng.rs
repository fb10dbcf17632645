//! Seeded random streams.
//!
//! Every random decision is drawn from a ChaCha8 stream whose seed is a
//! deterministic function of a run seed and a tag path such as
//! `(purpose, step, sequence index)`. Independent substreams make batch
//! construction order-independent and reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

// Purpose tags, kept distinct so streams never collide across subsystems.
pub const TAG_CORPUS_TABLE: u64 = 0x11;
pub const TAG_CORPUS_SAMPLE: u64 = 0x12;
pub const TAG_ENCODER: u64 = 0x21;
pub const TAG_INIT: u64 = 0x31;
pub const TAG_BATCH_ORDER: u64 = 0x41;
pub const TAG_TRAIN_MASK: u64 = 0x42;
pub const TAG_VAL_MASK: u64 = 0x43;
pub const TAG_TRAIN_ACC: u64 = 0x44;
pub const TAG_DECODE: u64 = 0x51;
pub const TAG_EVAL: u64 = 0x61;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed from `seed` and a tag path.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(seed), |acc, &t| mix(acc ^ mix(t)))
}

pub fn stream(seed: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, tags))
}
