//! Parameter storage and the basic layers shared by encoder and decoder.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::Rng;

use crate::tensor::{Tape, Tensor, Var};
use crate::{DexError, Real, Result};

/// Epsilon used by every affine layer norm in the network.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }

    pub fn from_index(i: usize) -> Self {
        ParamId(i)
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Non-trainable parameters (the director) never enter the optimizer.
    pub trainable: bool,
}

/// Flat, ordered, named parameter storage.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total scalar count of trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Optimizer state built before this call does not follow the change.
    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replaces a value, checking the shape is unchanged.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(DexError::shape(
                "param_set",
                format!(
                    "{}: {:?} vs {:?}",
                    slot.name,
                    slot.value.shape(),
                    value.shape()
                ),
            ));
        }
        slot.value = value;
        Ok(())
    }
}

/// Parameters placed on a tape for one forward pass.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Trainable parameters become gradient leaves, the rest constants.
    pub fn new<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>) -> Self {
        Self::with(tape, store, |p| p.trainable)
    }

    pub fn with<T: Real>(
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        requires_grad: impl Fn(&Param<T>) -> bool,
    ) -> Self {
        let vars = store
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), requires_grad(p)))
            .collect();
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Gradient of every parameter; zeros where nothing flowed.
    pub fn grads<T: Real>(&self, tape: &Tape<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| tape.grad_tensor(v)).collect()
    }
}

fn xavier<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(&[fan_in, fan_out], data).expect("shape")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        trainable: bool,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out), trainable);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]), trainable);
        Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    /// `x[M, in] -> [M, out]`
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let h = tape.matmul(x, bind.var(self.weight))?;
        tape.add_suffix(h, bind.var(self.bias))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Layer norm over the last axis with learnable gain and shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]), true),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim]), true),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let h = tape.layer_norm(x, LN_EPS)?;
        let h = tape.mul_suffix(h, bind.var(self.gain))?;
        tape.add_suffix(h, bind.var(self.shift))
    }
}

/// Two-layer feed-forward transform `C -> 4C -> C` with GELU.
///
/// Experts and the director share this layout, which GEMA relies on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        trainable: bool,
    ) -> Self {
        FeedForward {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, 4 * dim, trainable),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), 4 * dim, dim, trainable),
        }
    }

    /// `x[M, C] -> [M, C]`
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, bind, x)?;
        let h = tape.gelu(h);
        self.fc2.forward(tape, bind, h)
    }

    /// Parameter ids in a fixed order; equal positions line up across
    /// feed-forwards of the same shape.
    pub fn params(&self) -> [ParamId; 4] {
        [self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]
    }
}

/// Multi-head self-attention within each image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Attention {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), dim, 3 * dim, true),
            proj: Linear::new(store, rng, &format!("{name}.proj"), dim, dim, true),
            heads,
        }
    }

    /// `x[B, n, C] -> [B, n, C]`
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bind: &Binding, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 {
            return Err(DexError::shape("attention", format!("expected [B,n,C], got {:?}", s)));
        }
        let (b, n, c) = (s[0], s[1], s[2]);
        let h = self.heads;
        if h == 0 || c % h != 0 {
            return Err(DexError::shape(
                "attention",
                format!("dim {} not divisible by {} heads", c, h),
            ));
        }
        let dh = c / h;
        let flat = tape.reshape(x, &[b * n, c])?;
        let qkv = self.qkv.forward(tape, bind, flat)?;

        let split = |which: usize| -> Vec<usize> {
            let mut idx = Vec::with_capacity(b * n * c);
            for bi in 0..b {
                for hi in 0..h {
                    for t in 0..n {
                        let row = (bi * n + t) * 3 * c + which * c + hi * dh;
                        idx.extend(row..row + dh);
                    }
                }
            }
            idx
        };
        let q = tape.gather(qkv, split(0), &[b * h, n, dh])?;
        let k = tape.gather(qkv, split(1), &[b * h, n, dh])?;
        let v = tape.gather(qkv, split(2), &[b * h, n, dh])?;

        let scores = tape.bmm(q, k, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax(scores, 2)?;
        let ctx = tape.bmm(att, v, false)?;

        let mut merge = Vec::with_capacity(b * n * c);
        for bi in 0..b {
            for t in 0..n {
                for hi in 0..h {
                    let row = ((bi * h + hi) * n + t) * dh;
                    merge.extend(row..row + dh);
                }
            }
        }
        let ctx = tape.gather(ctx, merge, &[b * n, c])?;
        let out = self.proj.forward(tape, bind, ctx)?;
        tape.reshape(out, &[b, n, c])
    }
}

/// Flattens `[.., C]` to `[M, C]`.
pub(crate) fn rows<T: Real>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let c = *s.last().ok_or_else(|| DexError::shape("rows", "scalar input"))?;
    let m = tape.value(x).numel() / c.max(1);
    tape.reshape(x, &[m, c])
}
