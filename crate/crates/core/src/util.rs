//! Small shared helpers: stable hashing and deterministic RNG derivation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the given byte slices. Stable across processes and platforms,
/// unlike `std::collections::hash_map::RandomState`.
pub fn stable_hash64(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for &b in *part {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        // separator so ("ab","c") != ("a","bc")
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// SplitMix64 finalizer: cheap, well-mixed 64-bit hash of a 64-bit state.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Deterministic RNG for one labelled draw site, derived from run seed plus
/// structured context. Execution order and thread scheduling never feed in.
pub fn derived_rng(seed: u64, label: &str, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut all: Vec<&[u8]> = Vec::with_capacity(parts.len() + 2);
    let seed_bytes = seed.to_le_bytes();
    all.push(&seed_bytes);
    all.push(label.as_bytes());
    all.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(stable_hash64(&all))
}
