//! Hierarchical random streams.
//!
//! Every random draw in training and inference comes from a stream named by
//! a root seed and a path of indices, e.g. `[INFER, sample, generation, level]`.
//! Streams with different paths are independent, and a stream's output does
//! not depend on which other streams were used before it, so results do not
//! change with the order or parallelism of the work.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain tag for per-step training draws.
pub const TRAIN: u64 = 1;
/// Domain tag for sampling.
pub const INFER: u64 = 2;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the stream at `path` under `seed`.
pub fn stream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        h = splitmix(h.wrapping_add(i as u64));
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
