//! Root-seeded named substreams.
//!
//! Every random draw in a run derives from one root seed through a named
//! substream (`data`, `init`, `lambda`, `perturbation`, `shuffle`), so
//! toggling one consumer never shifts another consumer's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a with fixed parameters; stable across platforms and releases
/// (std's hasher is not).
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic generator for `(root, name)`. Distinct names give
/// independent streams under the same root.
pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&root.to_le_bytes());
    seed[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// FNV-1a over the little-endian bytes of a float buffer, allocation-free.
/// Used to fingerprint tensors (e.g. the one-shot audit of target images).
pub fn content_hash(data: &[f64]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in data {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Derived 64-bit seed for a child component that owns its own substreams
/// (e.g. one adaptation run inside a multi-run protocol).
pub fn subseed(root: u64, name: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + name.len());
    bytes.extend_from_slice(&root.to_le_bytes());
    bytes.extend_from_slice(name.as_bytes());
    fnv1a(&bytes)
}
