//! Deterministic seed derivation.
//!
//! Every stochastic step in the pipeline draws its generator from a base seed
//! plus a path of stream identifiers (iteration, member index, candidate...),
//! so that any sub-computation can be replayed in isolation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix `base` with a sequence of stream identifiers into a new seed.
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut h = splitmix64(base);
    for &s in stream {
        h = splitmix64(h ^ splitmix64(s.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn rng_from(base: u64, stream: &[u64]) -> SeededRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}
