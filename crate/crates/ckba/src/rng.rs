//! Deterministic random streams.
//!
//! Every stage of the pipeline draws from its own counter-based ChaCha12
//! stream keyed by SHA-256 of the master seed and a stage tag, so stages can
//! be rerun independently and still reproduce bit-identical artifacts.

use rand_chacha::ChaCha12Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Name of the generator recorded in run manifests.
pub const GENERATOR_NAME: &str = "chacha12/sha256(seed,tag)";

/// Derives the stream for `(master_seed, tag)`.
pub fn stream(master_seed: u64, tag: &str) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(tag.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha12Rng::from_seed(key)
}
