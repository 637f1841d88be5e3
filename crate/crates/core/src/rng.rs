//! Seed derivation so independent components never share a random stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `seed ⊕ stream·φ`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream))
}

/// Stream tags used across the crate.
pub mod streams {
    pub const NONLABEL_INIT: u64 = 1;
    pub const LABEL_INIT: u64 = 2;
    pub const BATCH_ORDER: u64 = 3;
    pub const DEFENSE: u64 = 4;
    pub const DIFFUSION_INIT: u64 = 5;
    pub const DIFFUSION_TRAIN: u64 = 6;
    pub const DIFFUSION_SAMPLE: u64 = 7;
    pub const ALTERNATION: u64 = 8;
    pub const LOCAL_BRANCH_INIT: u64 = 9;
    pub const ATTACK: u64 = 10;
    pub const DATA_SPLIT: u64 = 11;
}
