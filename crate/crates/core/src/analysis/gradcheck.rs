//! Central finite-difference check of the full pretraining loss.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{sample_mask, LossWeights, MaskSet, Model};
use crate::dex::Frozen;
use crate::nn::{Binding, ParamId};
use crate::tensor::{Tape, Tensor};
use crate::{DexError, Result};

/// Denominator floor for relative errors, so coordinates whose true
/// derivative vanishes compare on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    /// Coordinates to probe, spread evenly over parameter groups.
    pub coordinates: usize,
    pub step: f64,
    pub batch: usize,
    pub seed: u64,
    pub lambda_co: f64,
    pub lambda_bal: f64,
    pub tol_median: f64,
    pub tol_max: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            coordinates: 240,
            step: 1e-4,
            batch: 4,
            seed: 0,
            lambda_co: 0.1,
            lambda_bal: 0.01,
            tol_median: 1e-6,
            tol_max: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GroupStats {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GradcheckReport {
    pub checked: usize,
    pub median_rel_err: f64,
    pub max_rel_err: f64,
    pub groups: Vec<GroupStats>,
    /// Director coordinates bound as gradient leaves.
    pub director_coordinates: usize,
    /// Largest director gradient magnitude; zero when the stop-gradient holds.
    pub director_max_abs_grad: f64,
    pub tol_median: f64,
    pub tol_max: f64,
    pub passed: bool,
}

fn group_of(name: &str) -> &'static str {
    if name.contains(".director.") {
        "director"
    } else if name.starts_with("decoder") {
        "decoder"
    } else if name.contains(".gate.") {
        "gate"
    } else if name.contains(".experts.") {
        "experts"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains("norm") {
        "norm"
    } else {
        "embed"
    }
}

/// Loss of one deterministic pass: no gate noise, per-layer routing and
/// director output held at `frozen`.
pub fn loss_frozen(
    model: &Model<f64>,
    images: &Tensor<f64>,
    mask: &MaskSet,
    frozen: &[Frozen<f64>],
    weights: &LossWeights,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = Binding::with(&mut tape, &model.params, |_| false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = model.pretrain_forward(&mut tape, &bind, images, mask, false, &mut rng, Some(frozen), weights)?;
    Ok(tape.value(pass.loss).item())
}

/// Compares tape gradients of the combined loss with central differences
/// on a stratified sample of coordinates. Gate noise is off, and each
/// layer's expert selection and director output are frozen at their
/// unperturbed values, so the reference loss is smooth and carries the same
/// stop-gradient as training. Director parameters are bound as gradient
/// leaves and must come back with exactly zero gradient.
pub fn gradcheck(model: &Model<f64>, images: &Tensor<f64>, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if !(opts.step > 0.0) || opts.coordinates == 0 {
        return Err(DexError::Config("gradcheck needs step > 0 and coordinates > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let weights = LossWeights::new(model.config.depth, opts.lambda_co, opts.lambda_bal);
    let mask = sample_mask(
        images.shape()[0],
        model.config.num_patches(),
        model.config.mask_ratio,
        &mut rng,
    )?;

    let mut tape = Tape::new();
    let bind = Binding::with(&mut tape, &model.params, |p| p.trainable || group_of(&p.name) == "director");
    let pass = model.pretrain_forward(&mut tape, &bind, images, &mask, false, &mut rng, None, &weights)?;
    let frozen: Vec<Frozen<f64>> = pass
        .blocks
        .iter()
        .map(|b| Frozen {
            experts: b.routing.indices.clone(),
            director_out: Some(tape.value(b.director_out).clone()),
        })
        .collect();
    tape.backward(pass.loss)?;
    let grads = bind.grads(&tape);
    drop(tape);

    let director: Vec<ParamId> = model.director_params();
    let director_coordinates = director.iter().map(|&id| grads[id.index()].numel()).sum();
    let director_max_abs_grad = director
        .iter()
        .flat_map(|&id| grads[id.index()].data().iter())
        .fold(0.0f64, |m, g| m.max(g.abs()));

    let mut groups: Vec<(&'static str, Vec<(ParamId, usize)>)> = Vec::new();
    for (id, p) in model.params.iter() {
        let g = group_of(&p.name);
        if !p.trainable || g == "director" {
            continue;
        }
        let slot = match groups.iter().position(|(name, _)| *name == g) {
            Some(i) => i,
            None => {
                groups.push((g, Vec::new()));
                groups.len() - 1
            }
        };
        groups[slot].1.extend((0..p.value.numel()).map(|e| (id, e)));
    }
    let per_group = opts.coordinates.div_ceil(groups.len().max(1));

    let mut probe = model.clone();
    let mut all = Vec::new();
    let mut stats = Vec::new();
    for (name, coords) in &groups {
        let take = per_group.min(coords.len());
        let mut worst = 0.0f64;
        for i in sample(&mut rng, coords.len(), take) {
            let (id, e) = coords[i];
            let orig = probe.params.get(id).data()[e];
            probe.params.get_mut(id).data_mut()[e] = orig + opts.step;
            let up = loss_frozen(&probe, images, &mask, &frozen, &weights)?;
            probe.params.get_mut(id).data_mut()[e] = orig - opts.step;
            let down = loss_frozen(&probe, images, &mask, &frozen, &weights)?;
            probe.params.get_mut(id).data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let analytic = grads[id.index()].data()[e];
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            worst = worst.max(err);
            all.push(err);
        }
        stats.push(GroupStats {
            group: (*name).into(),
            checked: take,
            max_rel_err: worst,
        });
    }
    if all.iter().any(|e| !e.is_finite()) {
        return Err(DexError::Numeric { op: "gradcheck" });
    }
    all.sort_by(f64::total_cmp);
    let median = if all.is_empty() {
        0.0
    } else if all.len() % 2 == 1 {
        all[all.len() / 2]
    } else {
        0.5 * (all[all.len() / 2 - 1] + all[all.len() / 2])
    };
    let max = all.last().copied().unwrap_or(0.0);
    Ok(GradcheckReport {
        checked: all.len(),
        median_rel_err: median,
        max_rel_err: max,
        groups: stats,
        director_coordinates,
        director_max_abs_grad,
        tol_median: opts.tol_median,
        tol_max: opts.tol_max,
        passed: median < opts.tol_median && max < opts.tol_max && director_max_abs_grad == 0.0,
    })
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        format!(
            "{} coordinates, median rel err {:.3e}, max {:.3e}, director |grad| max {:.3e}",
            self.checked, self.median_rel_err, self.max_rel_err, self.director_max_abs_grad
        )
    }
}
