//! Seeded random streams.
//!
//! Every stochastic routine in the crate draws from [`Rng64`], a thin wrapper
//! over PCG-XSL-RR 128/64 (`rand_pcg::Pcg64`, O'Neill 2014). Seeds are expanded
//! with `SeedableRng::seed_from_u64`. Uniforms use the top 53 bits of each
//! 64-bit output and normals use the polar-free Box–Muller transform, so every
//! stream is reproducible bit-for-bit on any platform.

use rand_core::{RngCore, SeedableRng};
use rand_pcg::Pcg64;

#[derive(Debug, Clone)]
pub struct Rng64 {
    inner: Pcg64,
    spare_normal: Option<f64>,
}

impl Rng64 {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Pcg64::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller; the second variate of each pair is cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping the log finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Uniform integer in `0..n` by rejection, free of modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// In-place Fisher–Yates shuffle (Durstenfeld, descending index).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Child seed for sub-streams: the next raw output of this stream.
    pub fn split_seed(&mut self) -> u64 {
        self.next_u64()
    }
}
