//! Attention-weight distribution and mask-mass diagnostics.

use lam_core::attention::AttentionRecord;
use lam_core::lam::Mask;
use lam_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_EPSILON: f64 = 0.01;
pub const DEFAULT_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` uniform edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// `counts / total`; sums to one.
    pub frequencies: Vec<f64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(e.to_string());
        w.write_record(["bin_lo", "bin_hi", "count", "frequency"]).map_err(io)?;
        for i in 0..self.counts.len() {
            w.write_record([
                format!("{:?}", self.edges[i]),
                format!("{:?}", self.edges[i + 1]),
                self.counts[i].to_string(),
                format!("{:?}", self.frequencies[i]),
            ])
            .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Io(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub histogram: Histogram,
    pub n_weights: usize,
    pub epsilon: f64,
    pub fraction_below: f64,
    pub skewness: f64,
}

/// Share of `weights` strictly below `epsilon`.
pub fn fraction_below(weights: &[f64], epsilon: f64) -> f64 {
    if weights.is_empty() {
        return 0.0;
    }
    weights.iter().filter(|&&w| w < epsilon).count() as f64 / weights.len() as f64
}

/// `m₃ / m₂^{3/2}` with central moments; a constant sample has skewness 0.
pub fn skewness(sample: &[f64]) -> f64 {
    let n = sample.len() as f64;
    if sample.is_empty() {
        return 0.0;
    }
    let mean = sample.iter().sum::<f64>() / n;
    let (m2, m3) = sample.iter().fold((0.0, 0.0), |(a, b), &x| {
        let d = x - mean;
        (a + d * d, b + d * d * d)
    });
    let (m2, m3) = (m2 / n, m3 / n);
    if m2 <= f64::EPSILON * f64::EPSILON * mean.abs().max(1.0) {
        return 0.0;
    }
    m3 / m2.powf(1.5)
}

pub fn histogram(weights: &[f64], bins: usize) -> Histogram {
    let mut counts = vec![0u64; bins];
    for &w in weights {
        let b = ((w * bins as f64).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let total = weights.len().max(1) as f64;
    Histogram {
        edges: (0..=bins).map(|i| i as f64 / bins as f64).collect(),
        frequencies: counts.iter().map(|&c| c as f64 / total).collect(),
        counts,
    }
}

/// Pools every post-softmax weight across records, layers and heads.
pub fn collect_attention_stats(
    records: &[AttentionRecord],
    epsilon: f64,
    bins: usize,
) -> Result<DistributionStats> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::Contract(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    if bins < 2 {
        return Err(Error::Contract("need at least two bins".into()));
    }
    let weights: Vec<f64> = records.iter().flat_map(|r| r.all_weights()).collect();
    if weights.is_empty() {
        return Err(Error::Contract("no attention weights to summarize".into()));
    }
    Ok(DistributionStats {
        histogram: histogram(&weights, bins),
        n_weights: weights.len(),
        epsilon,
        fraction_below: fraction_below(&weights, epsilon),
        skewness: skewness(&weights),
    })
}

/// Running mean; exact for constant inputs.
fn stable_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut m = 0.0;
    for (i, v) in values.enumerate() {
        m += (v - m) / (i + 1) as f64;
    }
    m
}

/// Per layer: mean `|M|` over informative key columns divided by the mean
/// over the remaining columns.
pub fn informative_mass(masks: &[Mask], positions: &[usize]) -> Result<Vec<f64>> {
    masks
        .iter()
        .map(|m| {
            let cols = m.cols();
            if let Some(&p) = positions.iter().find(|&&p| p >= cols) {
                return Err(Error::Index {
                    op: "informative_mass",
                    index: p,
                    bound: cols,
                });
            }
            let mut informative = vec![false; cols];
            for &p in positions {
                informative[p] = true;
            }
            let n_inf = informative.iter().filter(|&&b| b).count();
            if n_inf == 0 || n_inf == cols {
                return Err(Error::Contract(
                    "informative and non-informative column sets must both be non-empty".into(),
                ));
            }
            let v = &m.values;
            let informative = &informative;
            let column_values = |want: bool| {
                (0..m.rows()).flat_map(move |r| {
                    (0..cols)
                        .filter(move |&c| informative[c] == want)
                        .map(move |c| v.get(r, c).abs())
                })
            };
            let inf = stable_mean(column_values(true));
            let rest = stable_mean(column_values(false));
            Ok(if rest == 0.0 {
                if inf == 0.0 { 1.0 } else { f64::INFINITY }
            } else {
                inf / rest
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use lam_core::attention::{HeadRecord, LayerRecord};
    use lam_core::lam::MaskKind;
    use lam_core::Tensor;

    fn record(weights: Vec<Tensor>) -> AttentionRecord {
        AttentionRecord {
            layers: vec![LayerRecord {
                heads: weights
                    .into_iter()
                    .map(|w| HeadRecord {
                        logits: w.clone(),
                        weights: w,
                    })
                    .collect(),
                mask: None,
            }],
        }
    }

    #[test]
    fn fraction_below_counts() {
        assert_eq!(fraction_below(&[0.0, 0.1, 0.9], 0.05), 1.0 / 3.0);
    }

    #[test]
    fn uniform_attention() {
        let r = record(vec![Tensor::full(&[4, 4], 0.25), Tensor::full(&[4, 4], 0.25)]);
        let s = collect_attention_stats(&[r], 0.01, 50).unwrap();
        assert_eq!(s.fraction_below, 0.0);
        assert_eq!(s.skewness, 0.0);
        assert_eq!(s.histogram.total(), 2 * 16);
        assert_eq!(s.histogram.counts[12], 32);
        assert!((s.histogram.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn histogram_edges_and_conservation() {
        let w = [0.0, 0.02, 0.5, 0.999, 1.0];
        let h = histogram(&w, 50);
        assert_eq!(h.edges.len(), 51);
        assert_eq!(h.total(), 5);
        assert_eq!((h.counts[0], h.counts[1], h.counts[25], h.counts[49]), (1, 1, 1, 2));
    }

    #[test]
    fn fraction_below_is_monotone() {
        let w: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let mut prev = 0.0;
        for e in 1..100 {
            let f = fraction_below(&w, e as f64 / 100.0);
            assert!(f >= prev);
            prev = f;
        }
    }

    #[test]
    fn skewness_sign() {
        assert!(skewness(&[0.0, 0.0, 0.0, 0.0, 1.0]) > 0.0);
        assert!(skewness(&[1.0, 1.0, 1.0, 1.0, 0.0]) < 0.0);
        // 3-point oracle: {0, 0, 3}: mean 1, m2 = 2, m3 = 2 → 2 / 2^{1.5}
        assert!((skewness(&[0.0, 0.0, 3.0]) - 2.0 / 2f64.powf(1.5)).abs() < 1e-15);
    }

    #[test]
    fn stats_contract_errors() {
        assert!(matches!(collect_attention_stats(&[], 0.01, 50), Err(Error::Contract(_))));
        let r = record(vec![Tensor::full(&[2, 2], 0.5)]);
        assert!(collect_attention_stats(std::slice::from_ref(&r), 0.0, 50).is_err());
        assert!(collect_attention_stats(&[r], 0.01, 1).is_err());
    }

    fn mask(values: Tensor) -> Mask {
        Mask::new(MaskKind::SelfAttention, values).unwrap()
    }

    #[test]
    fn informative_mass_examples() {
        let constant = mask(Tensor::full(&[5, 5], 0.1));
        assert_eq!(informative_mass(&[constant], &[1, 3]).unwrap(), vec![1.0]);

        let mut t = Tensor::full(&[4, 4], -0.3);
        for r in 0..4 {
            for c in [0, 2] {
                t.data_mut()[r * 4 + c] *= 2.0;
            }
        }
        let doubled = mask(t);
        let ratios = informative_mass(&[doubled.clone(), doubled], &[0, 2]).unwrap();
        assert_eq!(ratios, vec![2.0, 2.0]);
    }

    #[test]
    fn informative_mass_contracts() {
        let m = mask(Tensor::ones(&[3, 3]));
        assert!(matches!(informative_mass(std::slice::from_ref(&m), &[]), Err(Error::Contract(_))));
        assert!(informative_mass(std::slice::from_ref(&m), &[0, 1, 2]).is_err());
        assert!(matches!(informative_mass(&[m], &[3]), Err(Error::Index { .. })));
    }
}
