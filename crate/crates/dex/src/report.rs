//! Analysis reports as JSON, histograms also as CSV.

use std::path::Path;

use dex_core::analysis::{
    activation_histograms, count_routing_flops, encoder_features, linear_probe, mean_pairwise_jsd, FlopQuery,
    FlopReport, ProbeResult, RoutingMode,
};
use dex_core::backbone::{Model, NetworkConfig};
use dex_core::synth::ModalityMixture;
use dex_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token counts always included in the cost table.
pub const FLOP_TOKENS: [u64; 3] = [64, 256, 1024];

/// Far from the indices a training run is likely to draw.
pub const EVAL_FIRST_INDEX: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityHistogram {
    pub modality: usize,
    pub samples: usize,
    /// Normalized activation mass; absent when no sample had this modality.
    pub distribution: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHistograms {
    pub layer: usize,
    /// Mean pairwise Jensen–Shannon divergence (bits) over modalities.
    pub mean_pairwise_jsd: Option<f64>,
    pub modalities: Vec<ModalityHistogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub samples: usize,
    pub experts: usize,
    pub layers: Vec<LayerHistograms>,
}

impl HistogramReport {
    pub fn final_layer_jsd(&self) -> Option<f64> {
        self.layers.last().and_then(|l| l.mean_pairwise_jsd)
    }
}

pub fn histogram_report<T: Real>(model: &Model<T>, mixture: &ModalityMixture, samples: usize) -> Result<HistogramReport> {
    let hists = activation_histograms(model, mixture, samples, 64, EVAL_FIRST_INDEX)?;
    let layers = hists
        .iter()
        .enumerate()
        .map(|(layer, per_modality)| {
            Ok(LayerHistograms {
                layer,
                mean_pairwise_jsd: mean_pairwise_jsd(per_modality)?,
                modalities: per_modality
                    .iter()
                    .enumerate()
                    .map(|(modality, h)| ModalityHistogram {
                        modality,
                        samples: h.samples,
                        distribution: h.normalized(),
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HistogramReport {
        samples,
        experts: model.config.num_experts,
        layers,
    })
}

/// One `layer,modality,expert,mass` row per cell; modalities without
/// samples get zero mass.
pub fn write_histogram_csv(path: &Path, report: &HistogramReport) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["layer", "modality", "expert", "mass"]).map_err(csv_err)?;
    for layer in &report.layers {
        for m in &layer.modalities {
            for expert in 0..report.experts {
                let mass = m.distribution.as_ref().map_or(0.0, |d| d[expert]);
                w.serialize((layer.layer, m.modality, expert, mass)).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRatio {
    pub tokens: u64,
    /// Token-wise over image-wise gate projection cost.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub entries: Vec<FlopReport>,
    pub projection_ratio: Vec<ProjectionRatio>,
}

/// Routing cost of `network` at batch `batch` for its own token count and
/// for [`FLOP_TOKENS`].
pub fn flops_report(network: &NetworkConfig, batch: usize) -> FlopsReport {
    let mut tokens: Vec<u64> = FLOP_TOKENS.to_vec();
    tokens.push(network.num_patches() as u64);
    tokens.sort_unstable();
    tokens.dedup();
    let mut entries = Vec::new();
    let mut projection_ratio = Vec::new();
    for &n in &tokens {
        let q = FlopQuery {
            tokens: n,
            dim: network.embed_dim as u64,
            experts: network.num_experts as u64,
            top_k: network.top_k as u64,
            batch: batch as u64,
        };
        let image = count_routing_flops(q, RoutingMode::ImageWise);
        let token = count_routing_flops(q, RoutingMode::TokenWise);
        projection_ratio.push(ProjectionRatio {
            tokens: n,
            ratio: token.gate_projection as f64 / image.gate_projection as f64,
        });
        entries.push(image);
        entries.push(token);
    }
    FlopsReport {
        entries,
        projection_ratio,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub samples: usize,
    /// Shape classification from frozen pooled encoder features.
    pub semantic: ProbeResult,
    pub modality: ProbeResult,
    pub semantic_chance: f64,
}

pub fn probe_report<T: Real>(model: &Model<T>, mixture: &ModalityMixture, samples: usize, l2: f64) -> Result<ProbeReport> {
    let f = encoder_features(model, mixture, samples, 64, EVAL_FIRST_INDEX)?;
    let semantic = linear_probe(&f.features, &f.shapes, l2)?;
    let modality = linear_probe(&f.features, &f.modalities, l2)?;
    for (what, r) in [("semantic", &semantic), ("modality", &modality)] {
        if r.regularization_raised {
            log::warn!("{what} probe: singular system, l2 raised from {} to {}", r.l2_requested, r.l2_used);
        }
    }
    Ok(ProbeReport {
        samples,
        semantic_chance: 1.0 / semantic.classes as f64,
        semantic,
        modality,
    })
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
