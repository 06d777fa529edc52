//! Deterministic seed derivation.
//!
//! Every random choice in the pipeline flows from one root seed. Sub-streams
//! (per account, per run, per epoch) derive their own seed by hashing the
//! root together with a stable label, so independent jobs never share state
//! and results do not depend on execution order.

use sha2::{Digest, Sha256};

/// Derive a child seed from a root seed and a stable label.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}
