//! Deterministic seed derivation for parallel Monte-Carlo trials.
//!
//! Every random quantity in a simulation is drawn from a ChaCha stream
//! seeded by `derive_seed(master, tags…)`. The derivation is a fixed
//! SplitMix64 chain, so a (master seed, tag path) pair maps to the same
//! child seed on every platform and run, regardless of how trials are
//! scheduled across threads.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// One SplitMix64 step: mixes `state + input` into a well-distributed word.
#[inline]
fn splitmix64(state: u64, input: u64) -> u64 {
    let mut z = state
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(input);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a master seed and a path of integer tags
/// (e.g. `[drop_index, user_index, stream_kind]`).
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut state = splitmix64(0x6a09_e667_f3bc_c909, master);
    for &tag in tags {
        state = splitmix64(state, tag);
    }
    state
}

/// Deterministic RNG for the given master seed and tag path.
pub fn rng_for(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tags))
}
