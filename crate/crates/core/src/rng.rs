//! Named deterministic random streams.
//!
//! Every run owns a single root seed; each consumer derives an independent
//! stream from `(seed, name)` so components can be reproduced in isolation
//! and parallel schedules cannot reorder draws.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

/// 64-bit FNV-1a; stable across platforms and builds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Stream derived from the root seed and a component name.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&fnv1a(name.as_bytes()).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Sub-stream of a named stream, e.g. one per class id. Streams with
/// distinct indices never overlap.
pub fn indexed_rng(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = named_rng(seed, name);
    rng.set_stream(index.wrapping_add(1));
    rng
}

/// `[rows, cols]` tensor of standard normal draws.
pub fn randn_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data)
}

/// `[rows, cols]` tensor of uniform draws in `[0, 1)`.
pub fn uniform_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen::<f64>()).collect();
    Tensor::matrix(rows, cols, data)
}
