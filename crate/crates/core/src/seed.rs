//! Deterministic derivation of independent RNG streams from a base seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over `(base, stream)`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x6A09_E667_F3BC_C909);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(base: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

/// Stream ids, kept in one place so no two consumers share a stream.
pub(crate) mod stream {
    pub const WORLD: u64 = 1;
    pub const TASK: u64 = 1_000;
    pub const CLIENT_DATA: u64 = 2_000;
    pub const BASE_MODEL: u64 = 3_000;
    pub const ADAPTER_INIT: u64 = 4_000;
    pub const CLIENT_TRAIN: u64 = 5_000;
    pub const ROW_INIT: u64 = 6_000;
}
