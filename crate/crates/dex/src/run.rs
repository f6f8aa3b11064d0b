//! Drivers shared by the command line and the tests.

use std::path::Path;

use dex_core::analysis::{gradcheck, GradcheckOptions, GradcheckReport};
use dex_core::backbone::Model;
use dex_core::synth::{to_tensor, ModalityMixture};
use dex_core::tensor::Tensor;
use dex_core::train::{StepMetrics, Trainer};
use dex_core::Real;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::MetricsWriter;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.dex";
pub const CONFIG_FILE: &str = "config.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

fn prepare_output(config: &RunConfig) -> Result<&Path> {
    let dir = config.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir)
}

/// Trains for `config.train.steps` steps, writing the config snapshot,
/// metrics and the final checkpoint under the output directory.
pub fn pretrain<T: Real>(config: &RunConfig, mut on_step: impl FnMut(&StepMetrics)) -> Result<Trainer<T>> {
    config.validate()?;
    let dir = prepare_output(config)?;
    let snapshot = dir.join(CONFIG_FILE);
    std::fs::write(&snapshot, config.to_json_pretty() + "\n").map_err(|e| Error::io(&snapshot, e))?;
    let mut metrics = MetricsWriter::create(&dir.join(METRICS_FILE))?;
    let mut trainer = Trainer::<T>::new(config.network.clone(), config.train.clone(), config.data.clone())?;
    let every = (config.train.steps / 20).max(1);
    let mut last: Option<StepMetrics> = None;
    while !trainer.is_done() {
        let m = match trainer.step_sampled() {
            Ok(m) => m,
            Err(e) => {
                metrics.finish()?;
                if let Some(l) = &last {
                    log::error!(
                        "aborted in step {}; step {} had self {}, co {:?}, bal {:?}",
                        trainer.step,
                        l.step,
                        l.loss_self,
                        l.loss_co_per_layer,
                        l.loss_bal_per_layer
                    );
                }
                return Err(e.into());
            }
        };
        metrics.write(&m)?;
        if (m.step + 1) % every == 0 {
            log::info!(
                "step {}/{}: loss {:.4} (self {:.4}) lr {:.2e}",
                m.step + 1,
                config.train.steps,
                m.loss_total,
                m.loss_self,
                m.lr
            );
        }
        on_step(&m);
        last = Some(m);
    }
    metrics.finish()?;
    checkpoint::save(&dir.join(CHECKPOINT_FILE), &trainer, config)?;
    Ok(trainer)
}

/// The first `count` samples of the stream as a batch.
pub fn fixed_batch<T: Real>(mixture: &ModalityMixture, count: usize) -> Result<Tensor<T>> {
    let samples: Vec<_> = (0..count as u64).map(|i| mixture.sample_at(i)).collect();
    Ok(to_tensor(&samples, mixture.image_size)?)
}

/// Gradient check of a freshly initialized 64-bit model. `leak_director`
/// lets gradients reach the director, which the check must catch.
pub fn run_gradcheck(config: &RunConfig, opts: &GradcheckOptions, leak_director: bool) -> Result<GradcheckReport> {
    config.validate()?;
    let mut model = Model::<f64>::new(config.network.clone(), config.train.seed)?;
    for block in &mut model.blocks {
        block.detach_director = !leak_director;
    }
    let images = fixed_batch(&config.data, opts.batch)?;
    Ok(gradcheck(&model, &images, opts)?)
}
