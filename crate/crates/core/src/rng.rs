//! Deterministic RNG stream derivation.
//!
//! Every random decision in the workspace draws from a [`ChaCha8Rng`] whose
//! key is derived from `(root seed, purpose tag, index)` through SHA-256.
//! Streams for distinct purposes are therefore independent, reproducible,
//! and insensitive to the order in which other streams are consumed —
//! which is what keeps parallel and sequential execution bit-identical.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG stream for `(seed, tag, idx)`.
pub fn derive(seed: u64, tag: &str, idx: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0x1f]);
    h.update(tag.as_bytes());
    h.update([0x1f]);
    h.update(idx.to_le_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derive a child `u64` seed; convenience for nesting stream families.
pub fn derive_seed(seed: u64, tag: &str, idx: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0x2f]);
    h.update(tag.as_bytes());
    h.update([0x2f]);
    h.update(idx.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}
