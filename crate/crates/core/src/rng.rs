//! Seed plumbing: every source of randomness in the crate draws from one
//! root seed through named substreams, so runs are reproducible end to end
//! and adding a new consumer never shifts the draws of an existing one.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derive a deterministic RNG for `name` from the root seed.
pub fn substream(seed: u64, name: &str) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

/// Like [`substream`] but additionally keyed by an index (epoch number,
/// instance number, ...), so per-item streams are independent of each other.
pub fn substream_indexed(seed: u64, name: &str, index: u64) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    hasher.update(index.to_le_bytes());
    ChaCha20Rng::from_seed(hasher.finalize().into())
}

/// Collapse a named substream to a single seed, for components that take a
/// `u64` rather than an RNG.
pub fn derived_seed(seed: u64, name: &str) -> u64 {
    use rand_chacha::rand_core::RngCore;
    substream(seed, name).next_u64()
}
