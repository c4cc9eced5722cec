//! Seed plumbing.
//!
//! Every random draw in the crate comes from a [`ChaCha8Rng`] seeded through
//! [`derive_seed`], which mixes a parent seed with a purpose tag and an index
//! using the SplitMix64 finalizer. Stages never share a generator, so each one
//! can be reproduced on its own from the top-level seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a child seed for `(purpose, index)` from `seed`.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = splitmix64(seed);
    for b in purpose.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    splitmix64(h ^ index)
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derive_rng(seed: u64, purpose: &str, index: u64) -> Rng {
    rng_from_seed(derive_seed(seed, purpose, index))
}
