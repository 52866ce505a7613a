//! Deterministic seed derivation.
//!
//! All randomness in a run flows from one root seed. Sub-seeds are the first
//! eight bytes of `sha256(root_le || label)`, so adding a consumer never
//! shifts the streams of existing ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn labeled_rng(root: u64, label: &str) -> Rng {
    rng(derive_seed(root, label))
}
