//! Deterministic random number generation.
//!
//! Every stochastic choice in the crate flows through [`Rng`], a ChaCha8
//! generator with hand-rolled float/gaussian/shuffle derivation so the
//! sampled values are pinned by this module alone. Independent streams
//! for (seed, epoch, example, ...) coordinates come from [`Rng::derive`],
//! which mixes the coordinates into a fresh seed; this is what makes
//! batch-parallel work bit-reproducible regardless of thread count.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// SplitMix64 finalizer; good avalanche, cheap, stable.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mix a tag into a seed, producing a new independent seed.
///
/// Used to derive per-task / per-example / per-epoch streams from one
/// run seed. Chaining is associative-free on purpose: order matters, so
/// `mix(mix(s, a), b) != mix(mix(s, b), a)` in general.
pub fn mix(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// Seeded generator with the crate's sampling conventions.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    /// Generator for a root seed.
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(splitmix64(seed)),
        }
    }

    /// Independent stream at coordinates `parts` under `seed`.
    ///
    /// Same (seed, parts) always yields the same stream; any change to
    /// any coordinate yields an unrelated stream.
    pub fn derive(seed: u64, parts: &[u64]) -> Self {
        let mut s = seed;
        for &p in parts {
            s = mix(s, p);
        }
        Rng::new(s)
    }

    /// Next raw 64-bit value.
    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n), unbiased. Panics if `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - u64::MAX % n;
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller (two uniforms per draw).
    pub fn gaussian(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
