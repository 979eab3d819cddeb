//! Deterministic RNG stream derivation.
//!
//! Every random decision in the simulator draws from a stream derived as
//! `stream(seed, &[TAG, a, b, ...])`. Streams are independent of scheduling
//! order, so running clients in parallel or rebuilding them from scratch
//! cannot change any draw.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Each distinct random purpose gets its own tag so that adding
/// draws to one stage never shifts the draws of another.
pub mod tag {
    pub const MODEL_INIT: u64 = 0x01;
    pub const SAMPLE_ROUND: u64 = 0x02;
    pub const CLIENT_TRAIN: u64 = 0x03;
    pub const EVAL_SELECT: u64 = 0x04;
    pub const EVAL_PREINFER: u64 = 0x05;
    pub const DATA_GLOBAL: u64 = 0x06;
    pub const DATA_CLIENT: u64 = 0x07;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a seed and a list of stream coordinates into a single 64-bit key.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut state = seed ^ 0xA076_1D64_78BD_642F;
    let mut out = splitmix64(&mut state);
    for &p in parts {
        state ^= p;
        out ^= splitmix64(&mut state).rotate_left(17);
    }
    out
}

/// Derive an independent RNG stream for `(seed, parts)`.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, parts))
}
