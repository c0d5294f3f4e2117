//! Seed derivation. Every random stream in the engine is seeded from one base
//! seed through [`derive_seed`], so runs are reproducible end to end.
//!
//! The scheme: `derive_seed(base, stream, index)` feeds `base`, then `stream`,
//! then `index` through SplitMix64 finalizers, chaining each output into the
//! next input. Streams are small integer labels (see [`stream`]); indices are
//! counters such as an image index or an update number.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream labels used by the engine.
pub mod stream {
    pub const DATA_TRAIN: u64 = 1;
    pub const DATA_VAL: u64 = 2;
    pub const DATA_TEST: u64 = 3;
    pub const ORDER: u64 = 4;
    pub const INIT: u64 = 5;
    pub const AUGMENT: u64 = 6;
    pub const LOSS_SAMPLING: u64 = 7;
    pub const DROPOUT: u64 = 8;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}
