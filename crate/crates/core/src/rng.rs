//! Named random substreams.
//!
//! Every stage draws randomness from a stream derived from the root seed and a
//! stage name, so adding or reordering stages never shifts another stage's
//! numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StageRng = ChaCha8Rng;

/// Derive a 64-bit seed for the substream `name` of `root`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seed for the `index`-th item of a stage (clip, grid cell, example).
pub fn derive_indexed(root: u64, name: &str, index: u64) -> u64 {
    derive_seed(derive_seed(root, name), &index.to_string())
}

pub fn stream(root: u64, name: &str) -> StageRng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, name))
}

pub fn from_seed(seed: u64) -> StageRng {
    ChaCha8Rng::seed_from_u64(seed)
}
