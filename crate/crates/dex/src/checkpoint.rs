//! Checkpoint files.
//!
//! Layout: the 8-byte magic `DEXCKPT1`, a little-endian `u64` byte length,
//! a UTF-8 JSON manifest of that length, then raw little-endian arrays.
//! Manifest offsets are relative to the first array byte. Arrays are stored
//! in the precision of the run that wrote them.

use std::path::Path;

use dex_core::nn::ParamId;
use dex_core::tensor::Tensor;
use dex_core::train::{schedules, AdamW, Moments, RngState, Trainer};
use dex_core::{DexError, Real};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"DEXCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file: {0}")]
    Format(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u64, expected: u32 },
    #[error("checkpoint is truncated: {0}")]
    Truncated(String),
    #[error("checkpoint does not fit the model: {0}")]
    Shape(String),
    #[error("checkpoint holds {found} arrays, the run needs {expected}")]
    Dtype { found: String, expected: &'static str },
    #[error("checkpoint config: {0}")]
    Config(#[from] DexError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the array section.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngRecord {
    /// 32-byte ChaCha key, hex.
    seed: String,
    stream: u64,
    /// Decimal `u128`.
    word_pos: String,
}

impl RngRecord {
    fn capture(s: &RngState) -> Self {
        RngRecord {
            seed: s.seed.iter().map(|b| format!("{b:02x}")).collect(),
            stream: s.stream,
            word_pos: s.word_pos.to_string(),
        }
    }

    fn restore(&self) -> Result<RngState, CheckpointError> {
        let bad = || CheckpointError::Format(format!("malformed rng record {self:?}"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        Ok(RngState {
            seed,
            stream: self.stream,
            word_pos: self.word_pos.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub step: usize,
    pub adam_steps: u64,
    pub config: RunConfig,
    rng_train: RngRecord,
    rng_data: RngRecord,
    pub arrays: Vec<ArrayEntry>,
}

fn param_key(name: &str) -> String {
    format!("param/{name}")
}

fn moment_keys(name: &str) -> (String, String) {
    (format!("adam.m/{name}"), format!("adam.v/{name}"))
}

fn freq_key(layer: usize) -> String {
    format!("gate.freq/{layer}")
}

/// Serializes a trainer and the config it was built from.
pub fn to_bytes<T: Real>(trainer: &Trainer<T>, config: &RunConfig) -> Vec<u8> {
    let mut data = Vec::new();
    let mut arrays = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, values: &[T]| {
        arrays.push(ArrayEntry {
            name,
            shape,
            dtype: T::DTYPE.to_string(),
            offset: data.len() as u64,
        });
        for &v in values {
            v.write_le(&mut data);
        }
    };
    let params = &trainer.model.params;
    for (id, p) in params.iter() {
        push(param_key(&p.name), p.value.shape().to_vec(), p.value.data());
        if let Some(m) = &trainer.optimizer.moments[id.index()] {
            let (km, kv) = moment_keys(&p.name);
            push(km, p.value.shape().to_vec(), &m.first);
            push(kv, p.value.shape().to_vec(), &m.second);
        }
    }
    for (l, block) in trainer.model.blocks.iter().enumerate() {
        push(freq_key(l), vec![block.gate.freq.len()], &block.gate.freq);
    }
    let (rng, data_rng) = trainer.rng_states();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.to_string(),
        step: trainer.step,
        adam_steps: trainer.optimizer.steps,
        config: config.clone(),
        rng_train: RngRecord::capture(&rng),
        rng_data: RngRecord::capture(&data_rng),
        arrays,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(16 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    out
}

pub fn save<T: Real>(path: &Path, trainer: &Trainer<T>, config: &RunConfig) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(trainer, config))?;
    Ok(())
}

/// A parsed checkpoint, not yet bound to a model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    data: Vec<u8>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < MAGIC.len() {
            return Err(if MAGIC.starts_with(bytes) {
                CheckpointError::Truncated(format!("{} bytes, no complete header", bytes.len()))
            } else {
                CheckpointError::Format("bad magic bytes".into())
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(CheckpointError::Format("bad magic bytes".into()));
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .ok_or_else(|| CheckpointError::Truncated("manifest length missing".into()))?
            .try_into()
            .expect("8-byte slice");
        let len = u64::from_le_bytes(len_bytes);
        let end = 16u64.checked_add(len).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
            CheckpointError::Truncated(format!("manifest of {len} bytes, {} available", bytes.len() - 16))
        })? as usize;
        let value: serde_json::Value = serde_json::from_slice(&bytes[16..end])
            .map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
        let version = value.get("format_version").and_then(|v| v.as_u64());
        match version {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(found) => {
                return Err(CheckpointError::Version {
                    found,
                    expected: FORMAT_VERSION,
                })
            }
            None => return Err(CheckpointError::Format("manifest has no format_version".into())),
        }
        let manifest: Manifest =
            serde_json::from_value(value).map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
        let data = bytes[end..].to_vec();
        for a in &manifest.arrays {
            let width = match a.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(CheckpointError::Format(format!("{}: unknown dtype {other}", a.name))),
            };
            let need = a.offset + (a.shape.iter().product::<usize>() * width) as u64;
            if need > data.len() as u64 {
                return Err(CheckpointError::Truncated(format!(
                    "{} needs {need} array bytes, {} present",
                    a.name,
                    data.len()
                )));
            }
        }
        Ok(Checkpoint { manifest, data })
    }

    pub fn config(&self) -> &RunConfig {
        &self.manifest.config
    }

    pub fn step(&self) -> usize {
        self.manifest.step
    }

    fn array<T: Real>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>, CheckpointError> {
        let a = self
            .manifest
            .arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| CheckpointError::Shape(format!("{name} missing")))?;
        if a.shape != shape {
            return Err(CheckpointError::Shape(format!(
                "{name}: stored {:?}, model has {:?}",
                a.shape, shape
            )));
        }
        if a.dtype != T::DTYPE {
            return Err(CheckpointError::Dtype {
                found: a.dtype.clone(),
                expected: T::DTYPE,
            });
        }
        let start = a.offset as usize;
        Ok(self.data[start..start + shape.iter().product::<usize>() * T::BYTES]
            .chunks_exact(T::BYTES)
            .map(T::read_le)
            .collect())
    }

    /// Rebuilds the trainer with the checkpoint's own configuration.
    pub fn restore<T: Real>(&self) -> Result<Trainer<T>, CheckpointError> {
        self.restore_as(&self.manifest.config)
    }

    /// Rebuilds a trainer for `config`, which must describe the same
    /// architecture as the stored arrays.
    pub fn restore_as<T: Real>(&self, config: &RunConfig) -> Result<Trainer<T>, CheckpointError> {
        if self.manifest.dtype != T::DTYPE {
            return Err(CheckpointError::Dtype {
                found: self.manifest.dtype.clone(),
                expected: T::DTYPE,
            });
        }
        let fresh = Trainer::<T>::new(config.network.clone(), config.train.clone(), config.data.clone())?;
        let mut model = fresh.model;
        let mut optimizer = AdamW::new(&model.params);
        optimizer.steps = self.manifest.adam_steps;

        let mut expected = Vec::new();
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let (name, shape) = {
                let p = model.params.param(id);
                (p.name.clone(), p.value.shape().to_vec())
            };
            let values = self.array::<T>(&param_key(&name), &shape)?;
            model.params.set(id, Tensor::from_vec(&shape, values)?)?;
            expected.push(param_key(&name));
            if let Some(slot) = optimizer.moments[id.index()].as_mut() {
                let (km, kv) = moment_keys(&name);
                *slot = Moments {
                    first: self.array(&km, &shape)?,
                    second: self.array(&kv, &shape)?,
                };
                expected.push(km);
                expected.push(kv);
            }
        }
        let (sigma, momentum) = match self.manifest.step {
            0 => (config.train.sigma_init, config.train.m_init),
            s => {
                let last = schedules(s - 1, &config.train);
                (last.sigma, last.momentum)
            }
        };
        for (l, block) in model.blocks.iter_mut().enumerate() {
            block.gate.freq = self.array(&freq_key(l), &[block.gate.freq.len()])?;
            block.gate.sigma = T::of(sigma);
            block.director.momentum = T::of(momentum);
            expected.push(freq_key(l));
        }
        if let Some(extra) = self.manifest.arrays.iter().find(|a| !expected.contains(&a.name)) {
            return Err(CheckpointError::Shape(format!("{} has no place in the model", extra.name)));
        }
        Ok(Trainer::from_parts(
            model,
            optimizer,
            config.train.clone(),
            config.data.clone(),
            self.manifest.step,
            self.manifest.rng_train.restore()?,
            self.manifest.rng_data.restore()?,
        )?)
    }
}
