//! SplitMix64, the single pseudo-random source for shuffling, id sampling,
//! parameter initialization and dropout.
//!
//! The algorithm is pinned so results can be reproduced outside this crate:
//!
//! ```text
//! state += 0x9E3779B97F4A7C15
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! return z ^ (z >> 31)
//! ```
//!
//! `below(n)` uses rejection sampling on the raw 64-bit output (values at or
//! above the largest multiple of `n` are redrawn, then reduced modulo `n`);
//! `next_f64` takes the top 53 bits.

use rand_core::{RngCore, SeedableRng};

/// Thin wrapper over `rand_xoshiro`'s generator that pins the derived
/// sampling rules below.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    inner: rand_xoshiro::SplitMix64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: rand_xoshiro::SplitMix64::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % n;
            }
        }
    }

    /// Uniform float in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform float in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// In-place Fisher–Yates shuffle, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    /// Independent generator derived from this one's next output.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }
}
