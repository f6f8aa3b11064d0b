use alloc::format;
use alloc::vec::Vec;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{DexError, Real, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
}

/// AdamW with decoupled weight decay and bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    /// Indexed like the parameter store; `None` for frozen parameters.
    pub moments: Vec<Option<Moments<T>>>,
    pub steps: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| {
                p.trainable.then(|| Moments {
                    first: alloc::vec![T::zero(); p.value.numel()],
                    second: alloc::vec![T::zero(); p.value.numel()],
                })
            })
            .collect();
        AdamW { moments, steps: 0 }
    }

    /// One update of every trainable parameter. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Tensor<T>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != store.len() || self.moments.len() != store.len() {
            return Err(DexError::Contract(format!(
                "{} gradients and {} moment slots for {} parameters",
                grads.len(),
                self.moments.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            let g = &grads[id.index()];
            if g.shape() != p.value.shape() {
                return Err(DexError::shape(
                    "adamw_step",
                    format!("{}: grad {:?} vs {:?}", p.name, g.shape(), p.value.shape()),
                ));
            }
            if p.trainable && !g.is_finite() {
                return Err(DexError::Numeric { op: "adamw_step" });
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (T::of(ADAM_BETA1), T::of(ADAM_BETA2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let lr = T::of(lr);
        let decay = T::one() - lr * T::of(weight_decay);
        let eps = T::of(ADAM_EPS);
        for (i, slot) in self.moments.iter_mut().enumerate() {
            let Some(m) = slot else { continue };
            let g = grads[i].data();
            let value = store.get_mut(ParamId::from_index(i)).data_mut();
            for j in 0..value.len() {
                m.first[j] = b1 * m.first[j] + (T::one() - b1) * g[j];
                m.second[j] = b2 * m.second[j] + (T::one() - b2) * g[j] * g[j];
                let mh = m.first[j] / c1;
                let vh = m.second[j] / c2;
                value[j] = value[j] * decay - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
