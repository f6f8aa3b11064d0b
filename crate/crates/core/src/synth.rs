//! Synthetic Non-IID multi-modality images.
//!
//! A modality `d ~ ρ` fixes the image style (band-limited background texture,
//! intensity offset, shape contrast, gamma); the semantic class (shape) is
//! drawn independently of it. Every sample is a pure function of
//! `(mixture, seed, index)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{DexError, Real, Result};

/// Number of sinusoids in a background texture.
const TEXTURE_WAVES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Disc,
    Square,
    Cross,
    Ring,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Disc, Shape::Square, Shape::Cross, Shape::Ring];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Shape> {
        Self::ALL.get(i).copied()
    }

    /// Signed distance (pixels) to the outline, negative inside.
    fn distance(self, dx: f64, dy: f64, radius: f64) -> f64 {
        match self {
            Shape::Disc => (dx * dx + dy * dy).sqrt() - radius,
            Shape::Square => dx.abs().max(dy.abs()) - radius * 0.85,
            Shape::Cross => {
                let arm = radius * 0.35;
                let h = (dx.abs() - radius).max(dy.abs() - arm);
                let v = (dx.abs() - arm).max(dy.abs() - radius);
                h.min(v)
            }
            Shape::Ring => ((dx * dx + dy * dy).sqrt() - radius * 0.7).abs() - radius * 0.3,
        }
    }
}

/// Rendering style of one modality.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModalityStyle {
    /// Centre of the background frequency band, cycles per image.
    pub band_center: f64,
    /// Half-width of the band, cycles per image.
    pub band_halfwidth: f64,
    pub noise_amplitude: f64,
    /// Intensity added inside the shape.
    pub contrast: f64,
    pub gamma: f64,
    pub offset: f64,
    /// Peak-to-peak strength of a linear illumination ramp.
    #[cfg_attr(feature = "serde", serde(default))]
    pub ramp: f64,
    /// Direction of the ramp, radians.
    #[cfg_attr(feature = "serde", serde(default))]
    pub ramp_angle: f64,
}

impl ModalityStyle {
    fn in_band(&self, radius: f64) -> bool {
        (radius - self.band_center).abs() <= self.band_halfwidth
    }
}

/// `P_mix = Σ_d ρ_d P_d` over modality-styled renderings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct ModalityMixture {
    pub image_size: usize,
    pub proportions: Vec<f64>,
    pub styles: Vec<ModalityStyle>,
    pub seed: u64,
}

impl Default for ModalityMixture {
    fn default() -> Self {
        let style = |band_center, noise_amplitude, contrast, gamma, offset, quarter_turns: f64| ModalityStyle {
            band_center,
            band_halfwidth: 1.0,
            noise_amplitude,
            contrast,
            gamma,
            offset,
            ramp: 0.2,
            ramp_angle: quarter_turns * PI / 2.0,
        };
        ModalityMixture {
            image_size: 32,
            proportions: vec![0.25; 4],
            styles: vec![
                style(2.5, 0.12, 0.35, 1.0, 0.15, 0.0),
                style(6.0, 0.12, 0.30, 0.8, 0.35, 1.0),
                style(10.0, 0.14, -0.20, 1.2, 0.65, 2.0),
                style(14.0, 0.12, 0.15, 1.5, 0.80, 3.0),
            ],
            seed: 0,
        }
    }
}

/// One generated image with its latent factors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Row-major `H × W`, values in `[0, 1]`.
    pub image: Vec<f64>,
    pub modality: usize,
    pub shape: Shape,
    pub center: (f64, f64),
    pub radius: f64,
    pub index: u64,
}

impl ModalityMixture {
    pub fn num_modalities(&self) -> usize {
        self.proportions.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.proportions.len();
        if d == 0 || self.styles.len() != d {
            return Err(DexError::Config(format!(
                "{} proportions for {} modality styles",
                d,
                self.styles.len()
            )));
        }
        if self.proportions.iter().any(|&p| !(p >= 0.0)) {
            return Err(DexError::Config("mixing proportions must be >= 0".into()));
        }
        let total: f64 = self.proportions.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(DexError::Config(format!(
                "mixing proportions sum to {}, expected 1",
                total
            )));
        }
        if self.image_size < 4 {
            return Err(DexError::Config("image_size must be at least 4".into()));
        }
        for s in &self.styles {
            if !(s.gamma > 0.0) || !(s.band_halfwidth > 0.0) || s.band_center < 0.0 {
                return Err(DexError::Config(format!("invalid modality style {:?}", s)));
            }
        }
        Ok(())
    }

    /// Whether every pair of modalities differs in some style parameter.
    pub fn has_distinct_styles(&self) -> bool {
        let s = &self.styles;
        (0..s.len()).all(|i| (i + 1..s.len()).all(|j| s[i] != s[j]))
    }

    fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// The `index`-th sample of the stream.
    pub fn sample_at(&self, index: u64) -> Sample {
        let mut rng = self.rng_for(index);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut modality = self.proportions.len() - 1;
        for (d, &p) in self.proportions.iter().enumerate() {
            acc += p;
            if u < acc && p > 0.0 {
                modality = d;
                break;
            }
        }
        // a trailing zero-weight modality can only be hit through rounding
        while self.proportions[modality] == 0.0 && modality > 0 {
            modality -= 1;
        }
        self.render(modality, index, &mut rng)
    }

    /// Sample with a forced modality, otherwise drawn as in [`Self::sample_at`].
    pub fn sample_modality(&self, modality: usize, index: u64) -> Sample {
        let mut rng = self.rng_for(index);
        let _: f64 = rng.random();
        self.render(modality, index, &mut rng)
    }

    /// `B` samples at stream positions drawn from `rng`.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Sample> {
        (0..batch).map(|_| self.sample_at(rng.random())).collect()
    }

    fn render(&self, modality: usize, index: u64, rng: &mut ChaCha8Rng) -> Sample {
        let style = &self.styles[modality];
        let size = self.image_size;
        let sf = size as f64;
        let shape = Shape::ALL[rng.random_range(0..Shape::ALL.len())];
        let cx = sf / 2.0 + rng.random_range(-0.25..0.25) * sf;
        let cy = sf / 2.0 + rng.random_range(-0.25..0.25) * sf;
        let radius = rng.random_range(0.18..0.28) * sf;

        let bins = band_bins(style, size);
        let waves: Vec<(f64, f64, f64)> = if bins.is_empty() {
            Vec::new()
        } else {
            (0..TEXTURE_WAVES)
                .map(|_| {
                    let (kx, ky) = bins[rng.random_range(0..bins.len())];
                    (kx as f64, ky as f64, rng.random_range(0.0..2.0 * PI))
                })
                .collect()
        };
        let wave_gain = (2.0 / TEXTURE_WAVES as f64).sqrt();
        let (ramp_x, ramp_y) = (style.ramp * style.ramp_angle.cos(), style.ramp * style.ramp_angle.sin());

        // cos(a + b) = cos a·cos b − sin a·sin b, tabulated per axis
        let tables: Vec<[Vec<f64>; 4]> = waves
            .iter()
            .map(|&(kx, ky, phase)| {
                let axis = |k: f64, shift: f64| -> (Vec<f64>, Vec<f64>) {
                    (0..size)
                        .map(|t| {
                            let a = 2.0 * PI * k * t as f64 / sf + shift;
                            (a.cos(), a.sin())
                        })
                        .unzip()
                };
                let (cx, sx) = axis(kx, 0.0);
                let (cy, sy) = axis(ky, phase);
                [cx, sx, cy, sy]
            })
            .collect();
        let mut image = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let (xf, yf) = (x as f64, y as f64);
                let texture: f64 = tables
                    .iter()
                    .map(|[cx, sx, cy, sy]| cx[x] * cy[y] - sx[x] * sy[y])
                    .sum::<f64>()
                    * wave_gain;
                let d = shape.distance(xf + 0.5 - cx, yf + 0.5 - cy, radius);
                let coverage = (0.5 - d).clamp(0.0, 1.0);
                let ramp = ramp_x * ((xf + 0.5) / sf - 0.5) + ramp_y * ((yf + 0.5) / sf - 0.5);
                let v = style.offset + ramp + style.noise_amplitude * texture + style.contrast * coverage;
                image[y * size + x] = v.clamp(0.0, 1.0).powf(style.gamma);
            }
        }
        Sample {
            image,
            modality,
            shape,
            center: (cx, cy),
            radius,
            index,
        }
    }

    /// Classifies modality by which band carries the most mean spectral power
    /// and returns the accuracy over `n_per_modality` samples of each.
    pub fn modality_separability_check(&self, n_per_modality: usize) -> Result<f64> {
        self.validate()?;
        let d = self.num_modalities();
        if d == 1 {
            return Ok(1.0);
        }
        let bands: Vec<Vec<(i64, i64)>> = self
            .styles
            .iter()
            .map(|s| band_bins(s, self.image_size))
            .collect();
        let mut correct = 0usize;
        for truth in 0..d {
            for i in 0..n_per_modality {
                let s = self.sample_modality(truth, i as u64);
                let power = power_spectrum(&s.image, self.image_size);
                let predicted = argmax(bands.iter().map(|b| band_power(&power, b, self.image_size)));
                correct += usize::from(predicted == truth);
            }
        }
        Ok(correct as f64 / (d * n_per_modality) as f64)
    }
}

/// Non-zero integer frequencies whose radius falls in the modality band,
/// one of each `±k` pair.
fn band_bins(style: &ModalityStyle, size: usize) -> Vec<(i64, i64)> {
    let half = (size / 2) as i64;
    let mut out = Vec::new();
    for ky in 0..half {
        for kx in -half + 1..half {
            if ky == 0 && kx <= 0 {
                continue;
            }
            let r = ((kx * kx + ky * ky) as f64).sqrt();
            if style.in_band(r) {
                out.push((kx, ky));
            }
        }
    }
    out
}

/// Subtracts the least-squares plane `a + b·x + c·y`.
fn detrend(image: &[f64], size: usize) -> Vec<f64> {
    let n = size as f64;
    let mid = (n - 1.0) / 2.0;
    let mean = image.iter().sum::<f64>() / image.len() as f64;
    let su2 = n * (0..size).map(|t| (t as f64 - mid).powi(2)).sum::<f64>();
    let (mut gx, mut gy) = (0.0, 0.0);
    for y in 0..size {
        for x in 0..size {
            let v = image[y * size + x] - mean;
            gx += v * (x as f64 - mid);
            gy += v * (y as f64 - mid);
        }
    }
    let (gx, gy) = (gx / su2, gy / su2);
    (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 - mid, (i / size) as f64 - mid);
            image[i] - mean - gx * x - gy * y
        })
        .collect()
}

/// `|F(kx, ky)|²` of the detrended image, `[size × size]`.
fn power_spectrum(image: &[f64], size: usize) -> Vec<f64> {
    let image = detrend(image, size);
    let n = size as f64;
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..size)
        .map(|t| {
            let a = 2.0 * PI * t as f64 / n;
            (a.cos(), a.sin())
        })
        .unzip();
    // rows first: R[y][kx]
    let mut re = vec![0.0; size * size];
    let mut im = vec![0.0; size * size];
    for y in 0..size {
        for k in 0..size {
            let (mut a, mut b) = (0.0, 0.0);
            for x in 0..size {
                let v = image[y * size + x];
                let t = (k * x) % size;
                a += v * cos[t];
                b -= v * sin[t];
            }
            re[y * size + k] = a;
            im[y * size + k] = b;
        }
    }
    let mut power = vec![0.0; size * size];
    for kx in 0..size {
        for ky in 0..size {
            let (mut a, mut b) = (0.0, 0.0);
            for y in 0..size {
                let t = (ky * y) % size;
                let (r, i) = (re[y * size + kx], im[y * size + kx]);
                // (r + i·j)(cos − sin·j)
                a += r * cos[t] + i * sin[t];
                b += i * cos[t] - r * sin[t];
            }
            power[ky * size + kx] = a * a + b * b;
        }
    }
    power
}

fn band_power(power: &[f64], bins: &[(i64, i64)], size: usize) -> f64 {
    if bins.is_empty() {
        return 0.0;
    }
    let wrap = |k: i64| k.rem_euclid(size as i64) as usize;
    bins.iter()
        .map(|&(kx, ky)| power[wrap(ky) * size + wrap(kx)])
        .sum::<f64>()
        / bins.len() as f64
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Stacks single-channel samples into `[B, 1, H, W]`.
pub fn to_tensor<T: Real>(samples: &[Sample], image_size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(samples.len() * image_size * image_size);
    for s in samples {
        if s.image.len() != image_size * image_size {
            return Err(DexError::shape(
                "to_tensor",
                format!("sample of {} pixels for size {}", s.image.len(), image_size),
            ));
        }
        data.extend(s.image.iter().map(|&v| T::of(v)));
    }
    Tensor::from_vec(&[samples.len(), 1, image_size, image_size], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dft_power_finds_a_pure_wave() {
        let size = 16;
        let img: Vec<f64> = (0..size * size)
            .map(|i| {
                let (x, y) = ((i % size) as f64, (i / size) as f64);
                (2.0 * PI * (3.0 * x + 1.0 * y) / size as f64).cos()
            })
            .collect();
        let p = power_spectrum(&img, size);
        let peak = argmax(p.iter().copied());
        // (kx=3, ky=1) or its mirror (kx=13, ky=15)
        assert!(peak == size + 3 || peak == 15 * size + 13, "peak at {}", peak);
        let expected = (size * size) as f64 * (size * size) as f64 / 4.0;
        assert!((p[size + 3] - expected).abs() < 1e-6 * expected);
    }
}
