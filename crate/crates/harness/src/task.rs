//! Planted-token two-modality classification task.
//!
//! A sequence is `L_a` tokens of modality A followed by `L_b` tokens of
//! modality B, every token isotropic Gaussian noise. In each modality `k`
//! positions additionally carry a planted signal: a unit direction `u` from a
//! shared pool, scaled by a signed amplitude. The sign is drawn once per
//! modality, so the pairwise dots `s_A_j · s_B_j` all share the sign of
//! `σ_A σ_B` and the label is an XOR of the two modality signs. Neither
//! modality alone carries any label information.

use lam_core::prng::Prng;
use lam_core::{Error, Result, Tensor};
use serde::{Deserialize, Serialize};

const POOL_STREAM: u64 = 0x706f_6f6c;

fn default_pool_size() -> usize {
    4
}

fn default_amplitude() -> [f64; 2] {
    [1.5, 2.5]
}

fn default_aligned() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(rename = "L_a")]
    pub l_a: usize,
    #[serde(rename = "L_b")]
    pub l_b: usize,
    pub d_in: usize,
    pub k: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Number of unit directions in the shared signal pool.
    #[serde(default = "default_pool_size")]
    pub pool_size: usize,
    /// Planted amplitudes are uniform on `[lo, hi)`.
    #[serde(default = "default_amplitude")]
    pub amplitude: [f64; 2],
    /// Plant modality B at the positions of modality A shifted by `L_a`,
    /// so the `j`-th planted pair is temporally aligned. Otherwise the two
    /// modalities draw their positions independently.
    #[serde(default = "default_aligned")]
    pub aligned: bool,
}

impl TaskSpec {
    pub fn seq_len(&self) -> usize {
        self.l_a + self.l_b
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_a == 0 || self.l_b == 0 || self.d_in == 0 || self.pool_size == 0 {
            return Err(Error::Config("L_a, L_b, d_in and pool_size must be positive".into()));
        }
        if self.k == 0 || self.k > self.l_a.min(self.l_b) {
            return Err(Error::Config(format!(
                "k must be in 1..=min(L_a, L_b) = {}, got {}",
                self.l_a.min(self.l_b),
                self.k
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        let [lo, hi] = self.amplitude;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config("amplitude must satisfy 0 < lo <= hi".into()));
        }
        Ok(())
    }

    /// Unit directions shared by every sample of this task.
    pub fn direction_pool(&self) -> Vec<Vec<f64>> {
        let mut rng = Prng::new(self.seed).fork(POOL_STREAM);
        (0..self.pool_size)
            .map(|_| loop {
                let v: Vec<f64> = (0..self.d_in).map(|_| rng.normal()).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    break v.iter().map(|x| x / norm).collect();
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[L_a + L_b × d_in]`
    pub tokens: Tensor,
    pub label: usize,
    /// Sorted planted positions, `k` per modality. Never shown to the model.
    pub informative_positions: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draws `n` samples. The direction pool depends only on `spec.seed`, so
/// successive calls with one `prng` give splits of the same task.
pub fn gen_dataset(spec: &TaskSpec, prng: &mut Prng, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let pool = spec.direction_pool();
    let (l_t, d) = (spec.seq_len(), spec.d_in);
    let [lo, hi] = spec.amplitude;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (mut pos_a, mut pos_b): (Vec<usize>, Vec<usize>) = if spec.aligned {
            let a = prng.sample_distinct(spec.l_a.min(spec.l_b), spec.k);
            let b = a.iter().map(|p| p + spec.l_a).collect();
            (a, b)
        } else {
            let a = prng.sample_distinct(spec.l_a, spec.k);
            let b = prng.sample_distinct(spec.l_b, spec.k).into_iter().map(|p| p + spec.l_a).collect();
            (a, b)
        };
        let u = &pool[prng.below(pool.len())];
        let sign_a = if prng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };
        let sign_b = if prng.next_u64() & 1 == 0 { 1.0 } else { -1.0 };

        let mut data: Vec<f64> = (0..l_t * d).map(|_| spec.noise_sigma * prng.normal()).collect();
        let mut plant = |pos: usize, sign: f64, prng: &mut Prng| -> Vec<f64> {
            let amp = lo + (hi - lo) * prng.next_f64();
            let s: Vec<f64> = u.iter().map(|x| sign * amp * x).collect();
            for (t, v) in data[pos * d..(pos + 1) * d].iter_mut().zip(&s) {
                *t += v;
            }
            s
        };
        let s_a: Vec<Vec<f64>> = pos_a.iter().map(|&p| plant(p, sign_a, prng)).collect();
        let s_b: Vec<Vec<f64>> = pos_b.iter().map(|&p| plant(p, sign_b, prng)).collect();
        let score: f64 = s_a.iter().zip(&s_b).map(|(a, b)| dot(a, b)).sum();

        pos_a.append(&mut pos_b);
        pos_a.sort_unstable();
        out.push(Sample {
            tokens: Tensor::new(&[l_t, d], data)?,
            label: usize::from(score > 0.0),
            informative_positions: pos_a,
        });
    }
    Ok(out)
}
