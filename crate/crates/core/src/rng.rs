//! Derived random streams.
//!
//! Every random consumer gets its own stream keyed by (master seed, scope
//! string, item ids). No global RNG state exists anywhere in the crate, so
//! results never depend on evaluation order or worker count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Deterministic stream for `(master, scope, ids)`.
pub fn stream(master: u64, scope: &str, ids: &[u64]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update([0xff]);
    hasher.update(scope.as_bytes());
    for id in ids {
        hasher.update([0xfe]);
        hasher.update(id.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
