//! Deterministic random streams. Every stage of the pipeline derives its own
//! named stream from the single run seed, so stages can be re-run or
//! reordered without perturbing each other's draws.

use rand::rngs::StdRng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

/// Derives a child seed from the run seed and a stream label.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is wide enough"))
}

/// A named random stream for one pipeline stage.
pub fn stream(seed: u64, label: &str) -> StdRng {
    StdRng::seed_from_u64(stream_seed(seed, label))
}

/// A named stream further split by index, for per-item draws that must not
/// depend on processing order.
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> StdRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    StdRng::seed_from_u64(u64::from_le_bytes(
        digest[..8].try_into().expect("digest is wide enough"),
    ))
}
