//! Per-modality expert activation histograms and their divergence.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::backbone::Model;
use crate::synth::{to_tensor, ModalityMixture, Sample};
use crate::{DexError, Real, Result};

/// Accumulated routing-weight mass per expert.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActivationHistogram {
    pub mass: Vec<f64>,
    pub samples: usize,
}

impl ActivationHistogram {
    pub fn new(num_experts: usize) -> Self {
        ActivationHistogram {
            mass: vec![0.0; num_experts],
            samples: 0,
        }
    }

    /// Mass as a distribution over experts; `None` when nothing was seen.
    pub fn normalized(&self) -> Option<Vec<f64>> {
        let total: f64 = self.mass.iter().sum();
        if self.samples == 0 || !(total > 0.0) {
            return None;
        }
        Some(self.mass.iter().map(|m| m / total).collect())
    }
}

/// Eval-mode routing of `count` stream samples starting at `first_index`,
/// binned as `[layer][modality]`.
pub fn activation_histograms<T: Real>(
    model: &Model<T>,
    mixture: &ModalityMixture,
    count: usize,
    batch: usize,
    first_index: u64,
) -> Result<Vec<Vec<ActivationHistogram>>> {
    if batch == 0 {
        return Err(DexError::Config("histogram batch must be >= 1".into()));
    }
    let r = model.config.num_experts;
    let d = mixture.num_modalities();
    let mut hist = vec![vec![ActivationHistogram::new(r); d]; model.config.depth];
    let mut start = 0;
    while start < count {
        let end = (start + batch).min(count);
        let samples: Vec<Sample> = (start..end)
            .map(|i| mixture.sample_at(first_index + i as u64))
            .collect();
        let images = to_tensor::<T>(&samples, mixture.image_size)?;
        let (_, routing) = model.encode_eval(&images)?;
        for (layer, dec) in routing.iter().enumerate() {
            for (b, s) in samples.iter().enumerate() {
                let h = &mut hist[layer][s.modality];
                h.samples += 1;
                for (&e, &w) in dec.experts_of(b).iter().zip(dec.weights_of(b)) {
                    h.mass[e] += w.as_f64();
                }
            }
        }
        start = end;
    }
    Ok(hist)
}

fn kl2(p: &[f64], m: &[f64]) -> f64 {
    p.iter()
        .zip(m)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / b).log2())
        .sum()
}

/// Jensen–Shannon divergence in bits, in `[0, 1]`. Inputs are normalized
/// first.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(DexError::shape(
            "jensen_shannon",
            alloc::format!("lengths {} and {}", p.len(), q.len()),
        ));
    }
    let norm = |v: &[f64]| -> Result<Vec<f64>> {
        let t: f64 = v.iter().sum();
        if v.iter().any(|&x| !(x >= 0.0)) || !(t > 0.0) {
            return Err(DexError::Contract("distribution must be non-negative with positive mass".into()));
        }
        Ok(v.iter().map(|x| x / t).collect())
    };
    let (p, q) = (norm(p)?, norm(q)?);
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl2(&p, &m) + 0.5 * kl2(&q, &m)).clamp(0.0, 1.0))
}

/// Mean JSD over pairs of modalities that received samples; `None` with
/// fewer than two such modalities.
pub fn mean_pairwise_jsd(hists: &[ActivationHistogram]) -> Result<Option<f64>> {
    let dists: Vec<Vec<f64>> = hists.iter().filter_map(|h| h.normalized()).collect();
    if dists.len() < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            total += jensen_shannon(&dists[i], &dists[j])?;
            pairs += 1;
        }
    }
    Ok(Some(total / pairs as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn disjoint_supports_give_one_bit() {
        assert!((jensen_shannon(&[1.0, 0.0], &[0.0, 1.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_give_zero() {
        assert_eq!(jensen_shannon(&[0.2, 0.3, 0.5], &[2.0, 3.0, 5.0]).unwrap(), 0.0);
    }

    #[test]
    fn empty_modalities_are_skipped() {
        let mut a = ActivationHistogram::new(2);
        a.mass = vec![1.0, 0.0];
        a.samples = 1;
        let empty = ActivationHistogram::new(2);
        assert_eq!(mean_pairwise_jsd(&[a.clone(), empty.clone()]).unwrap(), None);
        assert!(empty.normalized().is_none());
        let mut b = ActivationHistogram::new(2);
        b.mass = vec![0.0, 3.0];
        b.samples = 3;
        assert!((mean_pairwise_jsd(&[a, empty, b]).unwrap().unwrap() - 1.0).abs() < 1e-12);
    }
}
