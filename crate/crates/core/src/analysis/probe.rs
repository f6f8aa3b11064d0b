//! Closed-form ridge linear probe.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;

use crate::backbone::Model;
use crate::synth::{to_tensor, ModalityMixture, Sample};
use crate::tensor::Tensor;
use crate::{DexError, Real, Result};

const MIN_PER_CLASS: usize = 10;
const MAX_RAISES: usize = 16;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ProbeResult {
    /// Held-out accuracy.
    pub accuracy: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub classes: usize,
    pub l2_requested: f64,
    pub l2_used: f64,
    /// Set when the system was singular and the regularizer had to grow.
    pub regularization_raised: bool,
}

/// Features with the labels of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatures {
    /// `[n, d]`.
    pub features: Tensor<f64>,
    pub shapes: Vec<usize>,
    pub modalities: Vec<usize>,
}

/// Mean-pooled eval-mode encoder features of `count` stream samples.
pub fn encoder_features<T: Real>(
    model: &Model<T>,
    mixture: &ModalityMixture,
    count: usize,
    batch: usize,
    first_index: u64,
) -> Result<LabeledFeatures> {
    if batch == 0 {
        return Err(DexError::Config("probe batch must be >= 1".into()));
    }
    let c = model.config.embed_dim;
    let mut data = Vec::with_capacity(count * c);
    let mut shapes = Vec::with_capacity(count);
    let mut modalities = Vec::with_capacity(count);
    let mut start = 0;
    while start < count {
        let end = (start + batch).min(count);
        let samples: Vec<Sample> = (start..end)
            .map(|i| mixture.sample_at(first_index + i as u64))
            .collect();
        let pooled = model.pooled_features(&to_tensor::<T>(&samples, mixture.image_size)?)?;
        data.extend(pooled.data().iter().map(|x| x.as_f64()));
        shapes.extend(samples.iter().map(|s| s.shape.index()));
        modalities.extend(samples.iter().map(|s| s.modality));
        start = end;
    }
    Ok(LabeledFeatures {
        features: Tensor::from_vec(&[count, c], data)?,
        shapes,
        modalities,
    })
}

/// Raw pixels of `count` stream samples as features.
pub fn pixel_features(mixture: &ModalityMixture, count: usize, first_index: u64) -> Result<LabeledFeatures> {
    let dim = mixture.image_size * mixture.image_size;
    let samples: Vec<Sample> = (0..count).map(|i| mixture.sample_at(first_index + i as u64)).collect();
    let data = samples.iter().flat_map(|s| s.image.iter().copied()).collect();
    Ok(LabeledFeatures {
        features: Tensor::from_vec(&[count, dim], data)?,
        shapes: samples.iter().map(|s| s.shape.index()).collect(),
        modalities: samples.iter().map(|s| s.modality).collect(),
    })
}

/// In-place lower Cholesky factor of the `n × n` matrix `a`; `false` when a
/// pivot is not positive.
fn cholesky(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for k in 0..j {
            d -= a[j * n + k] * a[j * n + k];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= a[i * n + k] * a[j * n + k];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Solves `L Lᵀ x = b` for each of the `m` columns of `b` (`n × m`).
fn cholesky_solve(l: &[f64], n: usize, b: &mut [f64], m: usize) {
    for col in 0..m {
        for i in 0..n {
            let mut s = b[i * m + col];
            for k in 0..i {
                s -= l[i * n + k] * b[k * m + col];
            }
            b[i * m + col] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = b[i * m + col];
            for k in i + 1..n {
                s -= l[k * n + i] * b[k * m + col];
            }
            b[i * m + col] = s / l[i * n + i];
        }
    }
}

/// Standardizes features with training statistics, fits one-hot targets by
/// ridge regression `(XᵀX/n + λI) W = XᵀY/n`, and scores argmax predictions
/// on every fifth sample, which is held out.
pub fn linear_probe(features: &Tensor<f64>, labels: &[usize], l2: f64) -> Result<ProbeResult> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(DexError::shape(
            "linear_probe",
            format!("features {:?} for {} labels", features.shape(), labels.len()),
        ));
    }
    if !(l2 >= 0.0) {
        return Err(DexError::Config(format!("probe l2 {} must be >= 0", l2)));
    }
    let (n, d) = (features.shape()[0], features.shape()[1]);
    let x = features.data();
    let held_out = |i: usize| i % 5 == 4;
    let train: Vec<usize> = (0..n).filter(|&i| !held_out(i)).collect();
    let test: Vec<usize> = (0..n).filter(|&i| held_out(i)).collect();
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; classes];
    for &i in &train {
        counts[labels[i]] += 1;
    }
    if classes < 2 || counts.iter().any(|&c| c < MIN_PER_CLASS) || test.is_empty() {
        return Err(DexError::Contract(format!(
            "probe needs at least {} training samples in each of >= 2 classes, got {:?}",
            MIN_PER_CLASS, counts
        )));
    }

    let nt = train.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in &train {
        for (m, v) in mean.iter_mut().zip(&x[i * d..(i + 1) * d]) {
            *m += v / nt;
        }
    }
    let mut scale = vec![0.0; d];
    for &i in &train {
        for j in 0..d {
            let c = x[i * d + j] - mean[j];
            scale[j] += c * c / nt;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { 1.0 / s.sqrt() } else { 1.0 };
    }
    let row = |i: usize| -> Vec<f64> { (0..d).map(|j| (x[i * d + j] - mean[j]) * scale[j]).collect() };

    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d * classes];
    let mut target_mean = vec![0.0; classes];
    for &i in &train {
        target_mean[labels[i]] += 1.0 / nt;
    }
    for &i in &train {
        let r = row(i);
        for a in 0..d {
            if r[a] == 0.0 {
                continue;
            }
            for b in 0..=a {
                gram[a * d + b] += r[a] * r[b] / nt;
            }
            for c in 0..classes {
                let y = if labels[i] == c { 1.0 } else { 0.0 };
                rhs[a * classes + c] += r[a] * (y - target_mean[c]) / nt;
            }
        }
    }

    let mut lambda = l2;
    let mut raised = false;
    let mut factor;
    let mut attempt = 0;
    loop {
        factor = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..=a {
                factor[a * d + b] = gram[a * d + b];
            }
            factor[a * d + a] += lambda;
        }
        if cholesky(&mut factor, d) {
            break;
        }
        attempt += 1;
        if attempt > MAX_RAISES {
            return Err(DexError::Numeric { op: "linear_probe" });
        }
        lambda = (lambda * 10.0).max(1e-8);
        raised = true;
    }
    cholesky_solve(&factor, d, &mut rhs, classes);

    let correct = test
        .iter()
        .filter(|&&i| {
            let r = row(i);
            let pred = (0..classes)
                .map(|c| target_mean[c] + (0..d).map(|a| r[a] * rhs[a * classes + c]).sum::<f64>())
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (c, s)| if s > best.1 { (c, s) } else { best })
                .0;
            pred == labels[i]
        })
        .count();
    Ok(ProbeResult {
        accuracy: correct as f64 / test.len() as f64,
        train_samples: train.len(),
        test_samples: test.len(),
        classes,
        l2_requested: l2,
        l2_used: lambda,
        regularization_raised: raised,
    })
}
