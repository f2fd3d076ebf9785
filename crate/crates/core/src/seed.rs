//! Deterministic seed derivation.

use sha2::{Digest, Sha256};

/// Derive a child seed from a parent seed and a label. Stable across
/// platforms and releases; editing one label never perturbs another's stream.
pub fn derive_seed(parent: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(parent.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().expect("sha256 output is 32 bytes"))
}

/// Hex SHA-256 of arbitrary bytes, for manifests.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let out = Sha256::digest(bytes);
    out.iter().map(|b| format!("{b:02x}")).collect()
}
