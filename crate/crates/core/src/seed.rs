//! Seed derivation. Every random stream in a run is a pure function of the
//! run seed and a short tag path, so work can be split across threads without
//! changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `tags` into `base`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| {
        splitmix64(acc.rotate_left(23) ^ splitmix64(t))
    })
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags, kept distinct so no two purposes share a stream.
pub mod tag {
    pub const SERVER_INIT: u64 = 1;
    pub const CLIENT_INIT: u64 = 2;
    pub const PARTITION_MATRIX: u64 = 3;
    pub const PARTITION_SHUFFLE: u64 = 4;
    pub const TEST_SUBSET: u64 = 5;
    pub const LOCAL_SHUFFLE: u64 = 6;
    pub const UPLINK: u64 = 7;
    pub const DOWNLINK: u64 = 8;
}
