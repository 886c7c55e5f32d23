//! Seed derivation so every random stream is a pure function of the run
//! seed and a few indices.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a seed with a stream tag and an index.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ tag) ^ index)
}

pub fn child_rng(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag, index))
}

/// Stream tags.
pub(crate) mod tag {
    pub const SCENE: u64 = 1;
    pub const TRAIN_BATCH: u64 = 2;
    pub const TRAIN_NOISE: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const INIT: u64 = 5;
    pub const CODEC: u64 = 6;
    pub const VALIDATION: u64 = 7;
}
