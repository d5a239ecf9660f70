//! 64-bit content fingerprints (SHA-256 truncated to its first eight bytes).

use sha2::{Digest, Sha256};

pub fn hash64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}
