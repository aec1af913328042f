//! Seeded randomness.
//!
//! Every random stream is a ChaCha8 generator (`rand_chacha`), a counter-based
//! stream cipher, so a given seed yields the same bits on every platform.
//! Subsystems never share a stream: each derives its own seed from the run
//! seed and a fixed label via [`derive_seed`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Matrix, Scalar};

pub type SeededRng = ChaCha8Rng;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for `label` from `seed` (FNV-1a over the label,
/// folded through SplitMix64).
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(seed ^ mix(h))
}

pub fn rng(seed: u64, label: &str) -> SeededRng {
    SeededRng::seed_from_u64(derive_seed(seed, label))
}

/// Uniform entries in `[-scale, scale]`.
pub fn uniform<T: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize, scale: f64) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-scale..=scale)))
}

/// Uniform entries with variance `1/cols`, so rows have unit expected norm.
pub fn unit_rows<T: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix<T> {
    uniform(rng, rows, cols, (3.0 / cols as f64).sqrt())
}

/// Uniform initialization with variance `1/fan_in`.
pub fn fan_in_init<T: Scalar>(rng: &mut SeededRng, rows: usize, cols: usize) -> Matrix<T> {
    uniform(rng, rows, cols, (3.0 / rows as f64).sqrt())
}
