//! Deterministic seed derivation.
//!
//! Every random stream in the workspace is derived from one global seed via
//! `derive_seed`, so a single integer pins down generators, model ensembles,
//! and subsampling. The scheme is the first eight little-endian bytes of
//! `SHA-256(global_le_bytes || stream_le_bytes)`.

use sha2::{Digest, Sha256};

/// Derive the seed for an independent random stream.
pub fn derive_seed(global: u64, stream: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(global.to_le_bytes());
    hasher.update(stream.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
