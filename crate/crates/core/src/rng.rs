//! Deterministic stream derivation.
//!
//! Every random decision in the pipeline draws from a ChaCha stream derived
//! from a master seed plus a purpose label and indices. Runs are reproducible
//! from (seed, config, data) alone, and resuming mid-run re-derives the exact
//! same streams without serializing generator internals.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from a master seed, a purpose label, and indices.
pub fn stream(master: u64, purpose: &str, indices: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0xfe]);
    h.update(purpose.as_bytes());
    for ix in indices {
        h.update([0xfd]);
        h.update(ix.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(seed)
}

/// Collapse a purpose + indices to a child u64 seed (for APIs that take seeds).
pub fn child_seed(master: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0xfc]);
    h.update(purpose.as_bytes());
    for ix in indices {
        h.update([0xfb]);
        h.update(ix.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
