//! Seeded, platform-independent random streams.
//!
//! Every source of randomness in the pipeline draws from a [`stream`] keyed
//! by a user seed plus a role tag and optional indices (epoch, example,
//! sample). Results are therefore reproducible regardless of thread
//! scheduling or platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Role tags keeping independent uses of the same user seed decorrelated.
pub mod tag {
    pub const INIT: u64 = 0x1;
    pub const SHUFFLE: u64 = 0x2;
    pub const DROPOUT: u64 = 0x3;
    pub const AUGMENT: u64 = 0x4;
    pub const SPLIT: u64 = 0x5;
    pub const SYNTH: u64 = 0x6;
    pub const NOISE: u64 = 0x7;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a seed and tags into a single derived seed.
pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// Derive a ChaCha stream from a seed and a sequence of tags/indices.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &t in tags {
        state ^= t.wrapping_mul(0xD6E8_FEB8_6659_FD93);
        acc ^= splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    let mut s = acc;
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
