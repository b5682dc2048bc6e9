//! Seed plumbing. Every random draw in the crate comes from a ChaCha8 stream
//! whose seed is derived from a user seed plus a path of integer tags, so
//! independent consumers never share a stream and results do not depend on
//! evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

/// Stream tags used across the pipeline.
pub mod stream {
    pub const CANVAS: u64 = 0x01;
    pub const TEXTURE: u64 = 0x02;
    pub const TRIPLET: u64 = 0x03;
    pub const INIT: u64 = 0x04;
    pub const TRAIN: u64 = 0x05;
    pub const SGM: u64 = 0x10;
    pub const SRM: u64 = 0x11;
    pub const PRIOR: u64 = 0x12;
    pub const PROPAGATION: u64 = 0x13;
    pub const BENCH: u64 = 0x20;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `seed`.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn rng_for(seed: u64, tags: &[u64]) -> SeededRng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tags))
}
