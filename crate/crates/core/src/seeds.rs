//! Named sub-seeds derived from a master seed, so components can be
//! re-seeded independently (dataset, init, shuffle, per-record rendering).

use sha2::{Digest, Sha256};

pub fn derive(master: u64, label: &str) -> u64 {
    derive_indexed(master, label, 0)
}

pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}
