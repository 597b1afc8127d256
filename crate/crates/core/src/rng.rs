//! Seeded randomness keyed by work-item index.
//!
//! Every stochastic loop in the crate draws iteration `i` from its own stream
//! derived from `(seed, i)`, so results never depend on scheduling order or on
//! the number of worker threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_SEED: u64 = 42;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Combine a key path into one 64-bit value.
pub fn key(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x6A09_E667_F3BC_C908, |acc, &p| mix64(acc ^ mix64(p)))
}

/// Independent generator for work item `index` under `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generator for a nested work item, e.g. `(effect size, trial)`.
pub fn substream(seed: u64, path: &[u64]) -> ChaCha8Rng {
    stream(seed, key(path))
}

/// Counter-based uniform draw on `[0, 1)` for `(seed, mode, index)`.
pub fn uniform_at(seed: u64, mode: u64, index: u64) -> f64 {
    let bits = mix64(key(&[seed, mode, index]));
    // top 53 bits -> [0, 1)
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
