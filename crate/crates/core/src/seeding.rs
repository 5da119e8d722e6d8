//! Deterministic seed derivation.
//!
//! Every random stream in the pipeline is derived from the single global
//! seed plus a stream label and index, so no stage reads ambient entropy and
//! worker scheduling cannot change outputs.

use crate::retriever::features::fnv1a;

/// Derives a child seed from (base seed, stream label, index).
pub fn derive_seed(base: u64, stream: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(16 + stream.len());
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(stream.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a(&bytes)
}
