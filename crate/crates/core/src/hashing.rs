//! Stable, platform-independent content hashes.
//!
//! `std::hash` is not stable across releases, so query ids, cache keys and
//! derived seeds all go through SHA-256 over length-prefixed fields.

use sha2::{Digest, Sha256};

fn digest(parts: &[&str]) -> [u8; 32] {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    let out = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&out);
    bytes
}

/// Hex digest (first 16 bytes) of the given fields.
pub fn content_id(parts: &[&str]) -> String {
    let bytes = digest(parts);
    let mut s = String::with_capacity(32);
    for b in &bytes[..16] {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Derives an independent 64-bit seed from a global seed and a key.
pub fn derive_seed(global_seed: u64, key: &str) -> u64 {
    let seed = global_seed.to_string();
    let bytes = digest(&[&seed, key]);
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

/// Unit-interval value in [0, 1) derived from the given fields.
pub fn unit_hash(parts: &[&str]) -> f64 {
    let bytes = digest(parts);
    let v = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    (v >> 11) as f64 / (1u64 << 53) as f64
}
