//! Deterministic randomness: a counter-based generator for dropout masks and
//! helpers for seeded sampling.
//!
//! Dropout cannot depend on a stateful stream because the trainer must be
//! resumable mid-run: instead each element's keep/drop bit is a pure hash of
//! `(seed, layer, step, element)`.

use rand::Rng;

/// splitmix64 finalizer; a full-avalanche 64-bit mixer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hash a key tuple into one 64-bit word.
#[inline]
pub fn mix_key(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    mix64(mix64(mix64(mix64(seed) ^ a) ^ b) ^ c)
}

/// Uniform in [0, 1) from 53 high bits.
#[inline]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Counter-based dropout key: `(seed, layer index, step)`.
#[derive(Debug, Clone, Copy)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

impl DropoutKey {
    /// Keep-decision for one element; `true` means the activation survives.
    #[inline]
    pub fn keeps(&self, element: u64, rate: f64) -> bool {
        unit_f64(mix_key(self.seed, self.layer, self.step, element)) >= rate
    }
}

/// Standard Gumbel(0, 1) sample.
pub fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    // -ln(-ln u) with u in (0,1); nudge away from 0 to stay finite.
    let u: f64 = rng.random::<f64>().max(1e-300);
    -(-u.ln()).max(1e-300).ln()
}

/// Draw from an explicit categorical distribution over `0..weights.len()`.
///
/// Weights need not be normalized; they must be nonnegative and not all zero.
pub fn categorical<R: Rng>(rng: &mut R, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    debug_assert!(total > 0.0);
    let mut dart = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        dart -= w;
        if dart <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Sample from N(0, stddev²) truncated to ±2 stddev, by rejection.
pub fn truncated_normal<R: Rng>(rng: &mut R, stddev: f64) -> f64 {
    loop {
        // Box-Muller
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * stddev;
        }
    }
}

/// Choose `count` distinct indices from `0..n`, uniformly without
/// replacement (partial Fisher-Yates). Returned order is the draw order.
pub fn sample_without_replacement<R: Rng>(rng: &mut R, n: usize, count: usize) -> Vec<usize> {
    debug_assert!(count <= n);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}
