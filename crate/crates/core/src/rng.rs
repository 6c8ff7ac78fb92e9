//! Seed derivation for reproducible, independent random streams.
//!
//! Each pipeline stage derives its own stream from the run seed, a purpose
//! tag, and an item index, so adding cases or reordering stages never shifts
//! another stage's randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed, a purpose tag, and an index into one 64-bit seed.
///
/// SplitMix64 finalizer; identical on every platform.
pub(crate) fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded generator for the stream identified by `(base, tag, index)`.
pub(crate) fn stream(base: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tag, index))
}

/// Purpose tags; values are arbitrary but frozen for reproducibility.
pub(crate) mod tag {
    pub const SPINE_SAMPLE: u64 = 1;
    pub const RENDER_NOISE: u64 = 2;
    pub const CORRUPT: u64 = 3;
    pub const NET_INIT: u64 = 4;
}
