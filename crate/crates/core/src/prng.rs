//! SplitMix64 pseudo-random generator.
//!
//! State update, one 64-bit word per draw:
//!
//! ```text
//! state = state + 0x9E3779B97F4A7C15            (wrapping)
//! z = state
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (wrapping)
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB      (wrapping)
//! output = z ^ (z >> 31)
//! ```
//!
//! Uniform floats take the top 53 bits: `(output >> 11) * 2^-53`, which lies
//! in `[0, 1)`. Normals use the Box–Muller cosine branch on two uniforms,
//! with the first uniform mapped to `(0, 1]` so the logarithm is finite.
//! Only integer arithmetic feeds the raw stream, so every platform sees the
//! same sequence for the same seed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prng {
    state: u64,
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)` by rejection, so there is no modulo bias.
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

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Independent child stream. Deriving children by a fixed `tag` lets
    /// unrelated consumers (e.g. mask parameters vs. backbone parameters)
    /// draw without shifting each other's sequences.
    pub fn fork(&self, tag: u64) -> Prng {
        let mut mix = Prng::new(self.state ^ tag.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        Prng::new(mix.next_u64())
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, in draw order.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot draw {k} distinct values from {n}");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// I.i.d. uniform draws in `[lo, hi)`.
pub fn rand_uniform(prng: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    if lo >= hi || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Contract(format!(
            "rand_uniform needs finite lo < hi, got [{lo}, {hi})"
        )));
    }
    let n: usize = shape.iter().product();
    let span = hi - lo;
    let data = (0..n)
        .map(|_| {
            let v = lo + span * prng.next_f64();
            // rounding can land exactly on hi for extreme spans
            if v >= hi {
                lo
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape, data)
}

pub fn rand_normal(prng: &mut Prng, shape: &[usize], std: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| std * prng.normal()).collect())
}

/// Glorot/Xavier uniform: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(prng: &mut Prng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rand_uniform(prng, &[fan_in, fan_out], -a, a).expect("positive fan sizes")
}
