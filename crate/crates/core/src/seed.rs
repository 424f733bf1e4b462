//! Seed derivation.
//!
//! All randomness flows from one root seed. Sub-streams are derived by
//! mixing the root with a label and optional integer coordinates, so each
//! module (and each step, round or query) gets an independent, reproducible
//! generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine two seeds into one.
pub fn combine(a: u64, b: u64) -> u64 {
    mix64(a ^ mix64(b))
}

/// Derive a named sub-seed, e.g. `derive(root, "kmeans", &[query, split])`.
pub fn derive(root: u64, label: &str, coords: &[u64]) -> u64 {
    let mut s = combine(root, fnv1a64(label.as_bytes()));
    for &c in coords {
        s = combine(s, c);
    }
    s
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_rng(root: u64, label: &str, coords: &[u64]) -> ChaCha8Rng {
    rng(derive(root, label, coords))
}
