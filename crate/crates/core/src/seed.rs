//! Seed derivation. Every random stream in an experiment is keyed by the
//! master seed plus a path of counters, so results do not depend on the
//! order in which trials execute.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags used as the first path element.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const TRAIN_DATA: u64 = 3;
    pub const VALIDATION_DATA: u64 = 4;
    pub const TEST_DATA: u64 = 5;
    pub const FOLDS: u64 = 6;
    pub const RETRAIN_SPLIT: u64 = 7;
    pub const TRIAL: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `master` with each element of `path` in order.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
