//! Seeded randomness. All streams derive from a root seed so runs are
//! bit-reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::math;

pub type CoreRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> CoreRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Deterministic child seed for a named component (splitmix64 over the
/// root seed and a stream id).
pub fn split(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard normal draw (Box-Muller).
pub fn normal(rng: &mut CoreRng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        if u1 > f64::MIN_POSITIVE {
            return math::sqrt(-2.0 * math::ln(u1)) * libm::cos(core::f64::consts::TAU * u2);
        }
    }
}

/// Index drawn proportionally to non-negative `weights`; `None` when the
/// total weight is zero.
pub fn weighted_index(rng: &mut CoreRng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut target = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            return Some(i);
        }
        target -= w;
    }
    // rounding left us past the end: last positive weight
    weights.iter().rposition(|w| *w > 0.0)
}

/// Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut CoreRng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
