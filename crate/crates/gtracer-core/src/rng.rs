//! Deterministic, splittable random streams.
//!
//! Every random choice in the toolkit (dataset jitter, label flips, weight
//! initialization, batch shuffling, probe vectors, Monte-Carlo draws) pulls
//! from a ChaCha8 stream derived from `(seed, purpose, index)`. Streams are
//! pre-split, so results never depend on evaluation order or thread schedule.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn hash_str(s: &str) -> u64 {
    // FNV-1a over the purpose label.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a 64-bit subseed for `(seed, purpose, index)`.
pub fn subseed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut z = splitmix64(seed);
    z = splitmix64(z ^ hash_str(purpose));
    splitmix64(z ^ index)
}

/// A counter-based generator for the named stream.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    let s = subseed(seed, purpose, index);
    let mut key = [0u8; 32];
    let mut z = s;
    for chunk in key.chunks_mut(8) {
        z = splitmix64(z);
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
