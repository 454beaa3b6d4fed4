//! Deterministic random-stream derivation.
//!
//! Every random operation in the crate takes an explicit stream. Streams are
//! derived from a root seed plus a tag path, so independent pipeline stages
//! (mask sampling, message sampling, noise, shuffling) never share state and
//! runs are reproducible regardless of evaluation order or thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// SplitMix64 step; used only to expand seeds, never as the user-facing RNG.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent ChaCha stream from `seed` and a tag path.
///
/// Same inputs always give the same stream; distinct tag paths give
/// statistically independent streams.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha12Rng {
    let mut state = seed ^ 0x6a09_e667_f3bc_c908;
    let _ = splitmix64(&mut state);
    for &tag in tags {
        state ^= tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let _ = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}
