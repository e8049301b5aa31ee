//! Deterministic seed derivation.
//!
//! Every stage seed is `u64::from_le_bytes(sha256(global_seed_le || 0x00 || label)[..8])`,
//! so a single global seed fans out into independent, documented streams
//! (`"train"`, `"ensemble/3"`, `"lds/subset/17"`, ...).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update([0u8]);
    h.update(label.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(seed: u64, label: &str) -> ChaCha8Rng {
    rng(derive_seed(seed, label))
}

/// Hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
