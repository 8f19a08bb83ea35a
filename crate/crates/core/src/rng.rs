//! Named random substreams.
//!
//! Every random draw in a run derives from the single manifest seed. A
//! substream is identified by a label (`"init"`, `"sampling"`, `"noise"`, ...)
//! and a list of integer coordinates such as `(epoch, user)`, so the same
//! coordinates always reproduce the same stream regardless of thread
//! scheduling or the order in which clients are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

pub mod label {
    pub const INIT: &str = "init";
    pub const SAMPLING: &str = "sampling";
    pub const DROPOUT: &str = "dropout";
    pub const GRADIENT_NOISE: &str = "gradient-noise";
    pub const STATS_NOISE: &str = "stats-noise";
    pub const NEIGHBOR_CAP: &str = "neighbor-cap";
    pub const CLIENT_TAGS: &str = "client-tags";
    pub const EXPANSION_KEY: &str = "expansion-key";
}

/// Derive the generator for `(seed, label, coords)`.
pub fn substream(seed: u64, label: &str, coords: &[u64]) -> SimRng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    for c in coords {
        hasher.update(c.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    SimRng::from_seed(bytes)
}
