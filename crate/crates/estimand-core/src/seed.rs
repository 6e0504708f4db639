//! Deterministic seed derivation.
//!
//! All randomized components (simulator, imputer, Monte-Carlo validation)
//! derive child seeds from a master seed and an integer path, so parallel and
//! sequential execution see exactly the same streams. Derivation is a
//! SplitMix64 walk over the path elements; children are statistically
//! independent for distinct paths.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a path of indices.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(master ^ 0x6a09_e667_f3bc_c909);
    for &p in path {
        state = splitmix64(state ^ splitmix64(p.wrapping_add(0x510e_527f_ade6_82d1)));
    }
    state
}

/// A counter-based RNG at the given derivation path.
pub fn rng_at(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
