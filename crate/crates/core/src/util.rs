//! Small shared helpers: stable seed derivation and canonical hashing.

use sha2::{Digest, Sha256};

/// Derives a child seed from a base seed and a list of string labels.
///
/// Uses SHA-256 over the little-endian base seed and the labels separated by
/// a unit separator, so the result is stable across platforms, Rust versions,
/// and process runs. Used wherever a task, trial, or draw needs its own
/// independent deterministic RNG stream.
pub fn derive_seed(base: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for label in labels {
        hasher.update([0x1f]);
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// Hex-encoded SHA-256 of a byte string; used for config hashing.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
