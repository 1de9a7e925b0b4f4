//! Deterministic seed derivation.
//!
//! Every source of randomness in the pipeline is a pure function of a root
//! seed plus a domain label and integer coordinates (epoch, scene index,
//! label id, ...). Nothing holds RNG state across steps, which makes resumed
//! runs bit-compatible with straight-through runs.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Derive a ChaCha20 RNG from a root seed, a domain label, and coordinates.
///
/// The key is SHA-256 over the canonical little-endian encoding, so distinct
/// (seed, domain, parts) tuples give independent streams on every platform.
pub fn rng_for(seed: u64, domain: &str, parts: &[u64]) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// Like [`rng_for`] but with an extra string coordinate (scene ids).
pub fn rng_for_str(seed: u64, domain: &str, text: &str, parts: &[u64]) -> ChaCha20Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update((text.len() as u64).to_le_bytes());
    hasher.update(text.as_bytes());
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha20Rng::from_seed(key)
}

/// Collapse (seed, domain, parts) to a single u64, for APIs that take a
/// plain seed.
pub fn derive_seed(seed: u64, domain: &str, parts: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for part in parts {
        hasher.update(part.to_le_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}
