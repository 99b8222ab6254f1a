//! Deterministic random streams.
//!
//! A single experiment seed expands into independent named streams (`data`,
//! `rbm`, `qbm`, `nn`, `pimc`, ...) so that subsystems never share a random
//! sequence and every run is reproducible from `(seed, stream name)` alone.
//! The stream key is the seed in the first eight bytes (little-endian) and the
//! stream name, truncated to 24 bytes, in the rest.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn key(seed: u64, name: &str) -> [u8; 32] {
    let mut k = [0u8; 32];
    k[..8].copy_from_slice(&seed.to_le_bytes());
    let bytes = name.as_bytes();
    let n = bytes.len().min(24);
    k[8..8 + n].copy_from_slice(&bytes[..n]);
    k
}

/// Named random stream derived from an experiment seed.
pub fn stream(seed: u64, name: &str) -> ChaCha12Rng {
    ChaCha12Rng::from_seed(key(seed, name))
}

/// Indexed substream for workers (chains, replicas) that need their own
/// sequence. Index 0 differs from the parent stream.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha12Rng {
    let mut rng = stream(seed, name);
    rng.set_stream(index.wrapping_add(1));
    rng
}
