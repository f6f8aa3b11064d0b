use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::AdamW;
use super::schedule::{schedules, TrainConfig};
use crate::backbone::{sample_mask, LossWeights, Model, NetworkConfig};
use crate::dex::{contribution_weights, gema_update, update_frequency_ema};
use crate::nn::Binding;
use crate::synth::{to_tensor, ModalityMixture, Sample};
use crate::tensor::{Tape, Tensor};
use crate::{DexError, Real, Result};

const STREAM_TRAIN: u64 = 1;
const STREAM_DATA: u64 = 2;

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StepMetrics {
    pub step: usize,
    pub loss_total: f64,
    pub loss_self: f64,
    pub loss_co_per_layer: Vec<f64>,
    pub loss_bal_per_layer: Vec<f64>,
    pub lr: f64,
    pub m: f64,
    pub sigma: f64,
    pub lambda_bal: f64,
}

/// Model, optimizer and random streams of a pretraining run.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    pub config: TrainConfig,
    pub mixture: ModalityMixture,
    /// Completed optimizer steps.
    pub step: usize,
    rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
}

impl<T: Real> Trainer<T> {
    pub fn new(network: NetworkConfig, config: TrainConfig, mixture: ModalityMixture) -> Result<Self> {
        config.validate()?;
        mixture.validate()?;
        if mixture.image_size != network.image_size || network.channels != 1 {
            return Err(DexError::Config(alloc::format!(
                "generator renders 1x{0}x{0} images, network expects {1}x{2}x{2}",
                mixture.image_size,
                network.channels,
                network.image_size
            )));
        }
        let mut model = Model::new(network, config.seed)?;
        for block in &mut model.blocks {
            block.gate.mu = T::of(config.mu);
            block.gate.sigma = T::of(config.sigma_init);
            block.director.momentum = T::of(config.m_init);
        }
        let optimizer = AdamW::new(&model.params);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_TRAIN);
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
        data_rng.set_stream(STREAM_DATA);
        Ok(Trainer {
            model,
            optimizer,
            config,
            mixture,
            step: 0,
            rng,
            data_rng,
        })
    }

    /// Reassembles a trainer from persisted state.
    pub fn from_parts(
        model: Model<T>,
        optimizer: AdamW<T>,
        config: TrainConfig,
        mixture: ModalityMixture,
        step: usize,
        rng: RngState,
        data_rng: RngState,
    ) -> Result<Self> {
        config.validate()?;
        mixture.validate()?;
        if optimizer.moments.len() != model.params.len() {
            return Err(DexError::Contract(alloc::format!(
                "optimizer state for {} parameters, model has {}",
                optimizer.moments.len(),
                model.params.len()
            )));
        }
        Ok(Trainer {
            model,
            optimizer,
            config,
            mixture,
            step,
            rng: rng.restore(),
            data_rng: data_rng.restore(),
        })
    }

    pub fn rng_states(&self) -> (RngState, RngState) {
        (RngState::capture(&self.rng), RngState::capture(&self.data_rng))
    }

    pub fn next_samples(&mut self) -> Vec<Sample> {
        self.mixture.sample_batch(self.config.batch_size, &mut self.data_rng)
    }

    pub fn next_batch(&mut self) -> Result<Tensor<T>> {
        let samples = self.next_samples();
        to_tensor(&samples, self.mixture.image_size)
    }

    /// Forward (training mode), combined loss, backward, AdamW on every
    /// trainable parameter, then per block: contribution weights, GEMA and
    /// the frequency EMA.
    pub fn train_step(&mut self, images: &Tensor<T>) -> Result<StepMetrics> {
        let sched = schedules(self.step, &self.config);
        for block in &mut self.model.blocks {
            block.gate.sigma = T::of(sched.sigma);
        }
        let depth = self.model.config.depth;
        let weights = LossWeights::new(depth, self.config.lambda_co, sched.lambda_bal);
        let batch = images.shape()[0];
        let mask = sample_mask(
            batch,
            self.model.config.num_patches(),
            self.model.config.mask_ratio,
            &mut self.rng,
        )?;

        let mut tape = Tape::new();
        let bind = Binding::new(&mut tape, &self.model.params);
        let pass = self
            .model
            .pretrain_forward(&mut tape, &bind, images, &mask, true, &mut self.rng, None, &weights)?;
        let value = |v| tape.value(v).item().as_f64();
        let metrics = StepMetrics {
            step: self.step,
            loss_total: value(pass.loss),
            loss_self: value(pass.loss_self),
            loss_co_per_layer: pass.blocks.iter().map(|b| value(b.alignment)).collect(),
            loss_bal_per_layer: pass.blocks.iter().map(|b| value(b.balance)).collect(),
            lr: sched.lr,
            m: sched.momentum,
            sigma: sched.sigma,
            lambda_bal: sched.lambda_bal,
        };
        if !metrics.loss_total.is_finite() {
            return Err(DexError::NonFiniteLoss {
                step: self.step,
                loss_self: metrics.loss_self,
                loss_co: metrics.loss_co_per_layer.clone(),
                loss_bal: metrics.loss_bal_per_layer.clone(),
            });
        }
        tape.backward(pass.loss)?;
        let mut grads = bind.grads(&tape);
        if let Some(limit) = self.config.grad_clip {
            clip_global_norm(&mut grads, limit);
        }
        drop(tape);
        self.optimizer.step(
            &mut self.model.params,
            &grads,
            sched.lr,
            self.config.weight_decay,
        )?;

        let m = T::of(sched.momentum);
        for (block, out) in self.model.blocks.iter_mut().zip(&pass.blocks) {
            let omega = contribution_weights(&out.routing)?;
            gema_update(&mut self.model.params, &block.experts, &block.director.ff, &omega, m)?;
            block.director.momentum = m;
            update_frequency_ema(&mut block.gate, &out.routing);
        }
        self.step += 1;
        Ok(metrics)
    }

    /// Draws the next batch and trains on it.
    pub fn step_sampled(&mut self) -> Result<StepMetrics> {
        let images = self.next_batch()?;
        self.train_step(&images)
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }
}

fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], limit: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let k = T::of(limit / norm);
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x = *x * k);
        }
    }
}
