//! Per-component seeds derived from the master seed.
//!
//! `derive_seed(master, label)` is the first 8 bytes (little-endian) of
//! `SHA-256(master.to_le_bytes() || label)`. Labels in use:
//!
//! - `train_paths`: training GBM paths
//! - `test_paths/<sigma>`: evaluation paths, `sigma` printed with `{}`
//! - `network`: weight initialization
//! - `minibatch_order`: per-epoch shuffles
//! - `simulate`: paths written by the `simulate` command

use sha2::{Digest, Sha256};

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn test_paths_label(sigma: f64) -> String {
    format!("test_paths/{sigma}")
}
