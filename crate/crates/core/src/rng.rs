//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit stream. Streams are derived
//! from a global seed plus a purpose tag and an index path, so two runs that
//! share a seed draw identical numbers regardless of scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Random stream type used throughout the crate.
pub type Stream = ChaCha8Rng;

/// Derive a stream from `(seed, purpose, path)`.
pub fn stream(seed: u64, purpose: &str, path: &[u64]) -> Stream {
    let mut hasher = Sha256::new();
    hasher.update(b"comhom-stream-v1");
    hasher.update(seed.to_le_bytes());
    hasher.update((purpose.len() as u64).to_le_bytes());
    hasher.update(purpose.as_bytes());
    for p in path {
        hasher.update(p.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}
