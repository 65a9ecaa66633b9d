//! Deterministic random-stream derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream derived
//! from `(root_seed, label, index)`. The label names the subsystem
//! ("corpus", "init", "teacher-iter", ...) and the index distinguishes
//! repeated uses (scene number, training iteration). Derivation is pure, so
//! any part of a run can be replayed in isolation: iteration 1234 of a
//! training loop does not depend on how many draws earlier iterations made.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// 64-bit FNV-1a hash of a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 step: advances the state and returns a well-mixed word.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives the 32-byte ChaCha seed for `(root, label, index)`.
pub fn derive_seed(root: u64, label: &str, index: u64) -> [u8; 32] {
    let mut state = root ^ fnv1a(label.as_bytes()) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    seed
}

/// A deterministic random stream for one `(root, label, index)` triple.
pub fn derive_rng(root: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(root, label, index))
}
