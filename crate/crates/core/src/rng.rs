//! Deterministic random streams.
//!
//! Every consumer of randomness derives its own ChaCha stream from
//! (root seed, purpose tag, index), so adding or reordering one consumer never
//! shifts the values another one sees. Sampling helpers are written directly
//! on top of `next_u64` to keep the value streams stable across dependency
//! upgrades.

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent stream for a (seed, purpose, index) triple. The same triple
/// always yields the same stream; distinct triples yield unrelated streams.
pub fn stream(seed: u64, purpose: &str, index: u64) -> ChaCha20Rng {
    let mut state = seed ^ fnv1a(purpose.as_bytes()).rotate_left(17) ^ index.wrapping_mul(0xa076_1d64_78bd_642f);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha20Rng::from_seed(key)
}

/// Uniform in [0, 1) with 53 random bits.
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in [lo, hi).
pub fn uniform(rng: &mut impl RngCore, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * unit_f64(rng)
}

/// Uniform integer in [0, n). Modulo bias is irrelevant here (n << 2^64) and
/// the simple form keeps the stream reproducible forever.
pub fn below(rng: &mut impl RngCore, n: usize) -> usize {
    debug_assert!(n > 0);
    (rng.next_u64() % n as u64) as usize
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Deterministic pseudo-random permutation of 0..n.
pub fn permutation(rng: &mut impl RngCore, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(rng, &mut idx);
    idx
}
