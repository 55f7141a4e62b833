//! Named random streams derived from a global seed.
//!
//! Each concern (data generation, initialization, attack noise, ...) draws
//! from its own stream keyed by a fixed label, so adding a consumer never
//! shifts another consumer's randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream for `label` under `seed`.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    indexed(seed, label, 0)
}

/// Stream for the `index`-th item of a concern, e.g. one attack per input.
pub fn indexed(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
