//! Deterministic, named RNG streams.
//!
//! Every stochastic step derives its own stream from `(seed, tag)` so that
//! adding or reordering one consumer never shifts the draws of another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// RNG stream for a named purpose under a root seed.
pub fn stream(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(tag.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Sub-stream indexed by an integer (e.g. per image, per epoch).
pub fn substream(seed: u64, tag: &str, index: u64) -> ChaCha8Rng {
    stream(seed, &format!("{tag}/{index}"))
}
