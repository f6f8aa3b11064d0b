//! Generated images as 8-bit PGM files plus a labels table.

use std::path::{Path, PathBuf};

use dex_core::synth::{ModalityMixture, Sample, Shape};

use crate::error::{Error, Result};

pub fn shape_name(shape: Shape) -> &'static str {
    match shape {
        Shape::Disc => "disc",
        Shape::Square => "square",
        Shape::Cross => "cross",
        Shape::Ring => "ring",
    }
}

/// Binary greyscale PGM, values in `[0, 1]` mapped to `0..=255`.
pub fn encode_pgm(image: &[f64], size: usize) -> Vec<u8> {
    let mut out = format!("P5\n{size} {size}\n255\n").into_bytes();
    out.extend(image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn sample_file_name(index: u64) -> String {
    format!("sample_{index:05}.pgm")
}

/// Writes samples `0..count` and `labels.csv` into `dir`; returns the image
/// paths.
pub fn write_samples(dir: &Path, mixture: &ModalityMixture, count: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels = dir.join("labels.csv");
    let csv_err = |source| Error::Csv {
        path: labels.clone(),
        source,
    };
    let mut w = csv::Writer::from_path(&labels).map_err(csv_err)?;
    w.write_record(["file", "index", "modality", "shape", "center_x", "center_y", "radius"])
        .map_err(csv_err)?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let s: Sample = mixture.sample_at(i);
        let name = sample_file_name(i);
        let path = dir.join(&name);
        std::fs::write(&path, encode_pgm(&s.image, mixture.image_size)).map_err(|e| Error::io(&path, e))?;
        w.serialize((&name, i, s.modality, shape_name(s.shape), s.center.0, s.center.1, s.radius))
            .map_err(csv_err)?;
        paths.push(path);
    }
    w.flush().map_err(|e| Error::io(&labels, e))?;
    Ok(paths)
}
