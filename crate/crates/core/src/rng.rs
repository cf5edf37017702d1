//! Seed derivation.
//!
//! Every random stream in the crate is a ChaCha8 generator seeded from a
//! single user seed mixed with a stream label and an index through
//! [`derive_seed`], so any sub-computation can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed, a stream tag and an index into an independent sub-seed.
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut h = splitmix64(base);
    for b in stream.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ splitmix64(index))
}

pub fn stream_rng(base: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}
