//! One director-experts block: image-wise top-K routing over an expert pool,
//! a director updated only by group EMA (GEMA), the alignment and balance
//! losses, and frequency-aware routing noise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::nn::{rows, Attention, Binding, FeedForward, Norm, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{DexError, Real, Result};

/// Routing state of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState<T> {
    /// Activation matrix `[C, R]`.
    pub pi: ParamId,
    /// Long-term activation frequency, length `R`.
    pub freq: Vec<T>,
    /// Noise standard deviation.
    pub sigma: T,
    /// Momentum of the frequency EMA.
    pub mu: T,
    pub epsilon: T,
    pub top_k: usize,
}

impl<T: Real> GateState<T> {
    pub fn num_experts(&self) -> usize {
        self.freq.len()
    }

    /// `δ_r = 1 − c_r / (Σ c + ε)`: rarely used experts get the largest boost.
    pub fn frequency_boost(&self) -> Vec<T> {
        let total = self.freq.iter().copied().sum::<T>() + self.epsilon;
        self.freq.iter().map(|&c| T::one() - c / total).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Director<T> {
    pub ff: FeedForward,
    /// GEMA momentum most recently applied.
    pub momentum: T,
}

/// Routing outcome for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision<T> {
    /// Post-softmax scores `[B, R]`.
    pub scores: Tensor<T>,
    pub top_k: usize,
    /// Selected experts `[B * K]`, best first.
    pub indices: Vec<usize>,
    /// Renormalized weights of the selected experts `[B * K]`.
    pub weights: Vec<T>,
    /// Hard assignment `[B, R]`, 0 or 1.
    pub indicator: Tensor<T>,
}

impl<T: Real> RoutingDecision<T> {
    pub fn batch(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn num_experts(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn experts_of(&self, b: usize) -> &[usize] {
        &self.indices[b * self.top_k..(b + 1) * self.top_k]
    }

    pub fn weights_of(&self, b: usize) -> &[T] {
        &self.weights[b * self.top_k..(b + 1) * self.top_k]
    }

    /// Dense `ω_{b,r}`, zero where `r` was not selected for `b`.
    pub fn dense_weights(&self) -> Vec<T> {
        let r = self.num_experts();
        let mut out = vec![T::zero(); self.batch() * r];
        for b in 0..self.batch() {
            for (&e, &w) in self.experts_of(b).iter().zip(self.weights_of(b)) {
                out[b * r + e] = out[b * r + e] + w;
            }
        }
        out
    }
}

/// Mean over the token axis: `[B, N, C] -> [B, C]`.
pub fn global_feature<T: Real>(tape: &mut Tape<T>, tokens: Var) -> Result<Var> {
    if tape.shape(tokens).len() != 3 || tape.shape(tokens)[1] == 0 {
        return Err(DexError::shape(
            "global_feature",
            format!("expected [B,N>=1,C], got {:?}", tape.shape(tokens)),
        ));
    }
    tape.mean_axis(tokens, 1)
}

/// Gate scores `[B, R]`. Training adds `σ(ε + δ)` to the logits with
/// `ε ~ N(0, 1)` drawn per (image, expert); eval is noise-free.
pub fn gate_scores<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bind: &Binding,
    feature: Var,
    gate: &GateState<T>,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let logits = tape.matmul(feature, bind.var(gate.pi))?;
    let logits = if training {
        let (b, r) = (tape.shape(logits)[0], tape.shape(logits)[1]);
        let boost = gate.frequency_boost();
        let noise: Vec<T> = (0..b * r)
            .map(|i| {
                let eps: f64 = rng.sample(StandardNormal);
                gate.sigma * (T::of(eps) + boost[i % r])
            })
            .collect();
        let noise = tape.constant(Tensor::from_vec(&[b, r], noise)?);
        tape.add(logits, noise)?
    } else {
        logits
    };
    if !tape.value(logits).is_finite() {
        return Err(DexError::Numeric { op: "gate_scores" });
    }
    tape.softmax(logits, 1)
}

fn decision_from<T: Real>(scores: &Tensor<T>, k: usize, indices: Vec<usize>) -> RoutingDecision<T> {
    let (b, r) = (scores.shape()[0], scores.shape()[1]);
    let s = scores.data();
    let mut weights = Vec::with_capacity(b * k);
    let mut indicator = vec![T::zero(); b * r];
    for bi in 0..b {
        let sel = &indices[bi * k..(bi + 1) * k];
        let total = sel.iter().map(|&e| s[bi * r + e]).sum::<T>();
        for &e in sel {
            weights.push(s[bi * r + e] / total);
            indicator[bi * r + e] = T::one();
        }
    }
    RoutingDecision {
        scores: scores.clone(),
        top_k: k,
        indices,
        weights,
        indicator: Tensor::from_vec(&[b, r], indicator).expect("shape"),
    }
}

fn check_scores<T: Real>(scores: &Tensor<T>, k: usize) -> Result<(usize, usize)> {
    if scores.rank() != 2 {
        return Err(DexError::shape(
            "select_top_k",
            format!("scores must be [B,R], got {:?}", scores.shape()),
        ));
    }
    let r = scores.shape()[1];
    if k == 0 || k > r {
        return Err(DexError::Contract(format!("top-k {} outside 1..={}", k, r)));
    }
    Ok((scores.shape()[0], r))
}

/// Picks the `K` highest scores per image, ties going to the lower expert
/// index, and renormalizes the selected scores into weights.
pub fn select_top_k<T: Real>(scores: &Tensor<T>, k: usize) -> Result<RoutingDecision<T>> {
    let (b, r) = check_scores(scores, k)?;
    let s = scores.data();
    let mut indices = Vec::with_capacity(b * k);
    let mut order: Vec<usize> = Vec::with_capacity(r);
    for bi in 0..b {
        order.clear();
        order.extend(0..r);
        let row = &s[bi * r..(bi + 1) * r];
        order.sort_by(|&x, &y| {
            row[y]
                .partial_cmp(&row[x])
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(x.cmp(&y))
        });
        indices.extend_from_slice(&order[..k]);
    }
    Ok(decision_from(scores, k, indices))
}

/// Routing with a fixed selection, e.g. held constant across finite
/// difference perturbations.
pub fn pinned_routing<T: Real>(
    scores: &Tensor<T>,
    k: usize,
    indices: &[usize],
) -> Result<RoutingDecision<T>> {
    let (b, r) = check_scores(scores, k)?;
    if indices.len() != b * k || indices.iter().any(|&e| e >= r) {
        return Err(DexError::Contract(format!(
            "pinned routing needs {} indices below {}",
            b * k,
            r
        )));
    }
    Ok(decision_from(scores, k, indices.to_vec()))
}

/// Differentiable weights `ω_{b,k} = s_{b,k} / Σ_{k'} s_{b,k'}` as `[B, K]`.
/// The selection itself is treated as constant.
pub fn routing_weights<T: Real>(
    tape: &mut Tape<T>,
    scores: Var,
    routing: &RoutingDecision<T>,
) -> Result<Var> {
    let (b, k, r) = (routing.batch(), routing.top_k, routing.num_experts());
    let idx = (0..b)
        .flat_map(|bi| routing.experts_of(bi).iter().map(move |&e| bi * r + e))
        .collect();
    let selected = tape.gather(scores, idx, &[b, k])?;
    let total = tape.sum_last(selected)?;
    let inv = tape.recip(total)?;
    tape.scale_rows(selected, inv)
}

/// `f̂^E_b = Σ_k ω_{b,k} · E_{idx(b,k)}(tokens_b)` for `tokens[B, N, C]`.
///
/// Each expert runs once on the images that selected it.
pub fn expert_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    tokens: Var,
    experts: &[FeedForward],
    routing: &RoutingDecision<T>,
    omega: Var,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    let k = routing.top_k;
    if routing.batch() != b || routing.num_experts() != experts.len() {
        return Err(DexError::Contract(format!(
            "routing for {}x{} does not match batch {} with {} experts",
            routing.batch(),
            routing.num_experts(),
            b,
            experts.len()
        )));
    }
    // (expert, image, slot) visiting order; row block of each (image, slot)
    let mut slot_block = vec![0usize; b * k];
    let mut parts = Vec::new();
    let mut block = 0;
    for (r, expert) in experts.iter().enumerate() {
        let users: Vec<usize> = (0..b * k).filter(|&j| routing.indices[j] == r).collect();
        if users.is_empty() {
            continue;
        }
        let mut rows_idx = Vec::with_capacity(users.len() * n * c);
        let mut w_idx = Vec::with_capacity(users.len() * n);
        for &j in &users {
            let bi = j / k;
            rows_idx.extend(bi * n * c..(bi + 1) * n * c);
            w_idx.extend(core::iter::repeat(j).take(n));
            slot_block[j] = block;
            block += 1;
        }
        let x = tape.gather(tokens, rows_idx, &[users.len() * n, c])?;
        let y = expert.forward(tape, bind, x)?;
        let w = tape.gather(omega, w_idx, &[users.len() * n])?;
        parts.push(tape.scale_rows(y, w)?);
    }
    let all = tape.concat(&parts)?;
    let mut out: Option<Var> = None;
    for slot in 0..k {
        let idx = (0..b)
            .flat_map(|bi| {
                let start = slot_block[bi * k + slot] * n * c;
                start..start + n * c
            })
            .collect();
        let term = tape.gather(all, idx, &[b, n, c])?;
        out = Some(match out {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    out.ok_or_else(|| DexError::Contract("top-k of zero".into()))
}

/// Director applied to the tokens the experts saw; the result is detached.
pub fn director_forward<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    tokens: Var,
    director: &Director<T>,
) -> Result<Var> {
    let out = director_forward_attached(tape, bind, tokens, director)?;
    Ok(tape.detach(out))
}

fn director_forward_attached<T: Real>(
    tape: &mut Tape<T>,
    bind: &Binding,
    tokens: Var,
    director: &Director<T>,
) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let x = rows(tape, tokens)?;
    let y = director.ff.forward(tape, bind, x)?;
    tape.reshape(y, &shape)
}

/// Mean over tokens of `1 − cos(f̂^E, f̂^D)`, in `[0, 2]`.
pub fn alignment_loss<T: Real>(tape: &mut Tape<T>, expert_out: Var, director_out: Var) -> Result<Var> {
    let cos = tape.cosine_similarity(expert_out, director_out)?;
    let mean = tape.mean(cos);
    let neg = tape.scale(mean, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// `R · Σ_r mean_b(s_{b,r}) · mean_b(I_{b,r})`.
pub fn balance_loss<T: Real>(
    tape: &mut Tape<T>,
    scores: Var,
    routing: &RoutingDecision<T>,
) -> Result<Var> {
    let (b, r) = (routing.batch(), routing.num_experts());
    if b == 0 {
        return Err(DexError::Contract("balance loss of an empty batch".into()));
    }
    let ind = routing.indicator.data();
    let load: Vec<T> = (0..r)
        .map(|e| (0..b).map(|bi| ind[bi * r + e]).sum::<T>() / T::of(b as f64))
        .collect();
    let load = tape.constant(Tensor::from_vec(&[r], load)?);
    let weighted = tape.mul_suffix(scores, load)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, r as f64 / b as f64))
}

/// Batch-level expert contributions `Ω_r = Σ_b ω_{b,r} / Σ_{r'} Σ_b ω_{b,r'}`.
pub fn contribution_weights<T: Real>(routing: &RoutingDecision<T>) -> Result<Vec<T>> {
    let (b, r) = (routing.batch(), routing.num_experts());
    let dense = routing.dense_weights();
    let per_expert: Vec<T> = (0..r)
        .map(|e| (0..b).map(|bi| dense[bi * r + e]).sum::<T>())
        .collect();
    let total = per_expert.iter().copied().sum::<T>();
    if !(total > T::zero()) {
        return Err(DexError::Contract("no expert was activated in the batch".into()));
    }
    Ok(per_expert.into_iter().map(|w| w / total).collect())
}

/// GEMA: `η ← m·η + (1 − m)·Σ_r Ω_r θ_r` at every parameter position.
/// Experts are read only.
pub fn gema_update<T: Real>(
    store: &mut ParamStore<T>,
    experts: &[FeedForward],
    director: &FeedForward,
    omega: &[T],
    momentum: T,
) -> Result<()> {
    if omega.len() != experts.len() {
        return Err(DexError::Contract(format!(
            "{} contribution weights for {} experts",
            omega.len(),
            experts.len()
        )));
    }
    if !(momentum >= T::zero() && momentum <= T::one()) {
        return Err(DexError::Contract(format!(
            "GEMA momentum {:?} outside [0, 1]",
            momentum
        )));
    }
    let total = omega.iter().copied().sum::<T>();
    if (total - T::one()).abs() > T::of(1e-6) {
        return Err(DexError::Contract(format!(
            "contribution weights sum to {:?}",
            total
        )));
    }
    let rest = T::one() - momentum;
    for (slot, &target) in director.params().iter().enumerate() {
        let shape = store.get(target).shape().to_vec();
        let mut mix = vec![T::zero(); store.get(target).numel()];
        for (expert, &w) in experts.iter().zip(omega) {
            let src = store.get(expert.params()[slot]);
            if src.shape() != shape.as_slice() {
                return Err(DexError::Contract(format!(
                    "expert parameter {} has shape {:?}, director expects {:?}",
                    store.param(expert.params()[slot]).name,
                    src.shape(),
                    shape
                )));
            }
            if w == T::zero() {
                continue;
            }
            for (m, &v) in mix.iter_mut().zip(src.data()) {
                *m = *m + w * v;
            }
        }
        for (eta, &m) in store.get_mut(target).data_mut().iter_mut().zip(&mix) {
            *eta = momentum * *eta + rest * m;
        }
    }
    Ok(())
}

/// `ĉ_r = Σ_b ω_{b,r} / (Σ_{r'} Σ_b ω_{b,r'} + ε)`, then `c ← μ·c + (1 − μ)·ĉ`.
pub fn update_frequency_ema<T: Real>(gate: &mut GateState<T>, routing: &RoutingDecision<T>) {
    let (b, r) = (routing.batch(), routing.num_experts());
    let dense = routing.dense_weights();
    let per_expert: Vec<T> = (0..r)
        .map(|e| (0..b).map(|bi| dense[bi * r + e]).sum::<T>())
        .collect();
    let total = per_expert.iter().copied().sum::<T>() + gate.epsilon;
    let mu = gate.mu;
    for (c, &w) in gate.freq.iter_mut().zip(&per_expert) {
        *c = mu * *c + (T::one() - mu) * (w / total);
    }
}

/// Block hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub mu: f64,
    pub epsilon: f64,
}

/// Attention sub-block followed by the DEX module.
#[derive(Debug, Clone, PartialEq)]
pub struct DexBlock<T> {
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_ffn: Norm,
    pub gate: GateState<T>,
    pub experts: Vec<FeedForward>,
    pub director: Director<T>,
    /// Cleared only to inject a fault in verification tooling.
    pub detach_director: bool,
}

impl<T: Real> DexBlock<T> {
    /// Experts are initialized independently; the director starts at their
    /// uniform average and is never trainable.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: &BlockSpec,
    ) -> Result<Self> {
        if spec.top_k == 0 || spec.top_k > spec.num_experts {
            return Err(DexError::Config(format!(
                "top_k {} must be in 1..={}",
                spec.top_k, spec.num_experts
            )));
        }
        let c = spec.dim;
        let norm_attn = Norm::new(store, &format!("{name}.norm_attn"), c);
        let attn = Attention::new(store, rng, &format!("{name}.attn"), c, spec.heads);
        let norm_ffn = Norm::new(store, &format!("{name}.norm_ffn"), c);
        let pi_data = (0..c * spec.num_experts)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                T::of(0.02 * z)
            })
            .collect();
        let pi = store.add(
            format!("{name}.gate.pi"),
            Tensor::from_vec(&[c, spec.num_experts], pi_data)?,
            true,
        );
        let experts: Vec<FeedForward> = (0..spec.num_experts)
            .map(|r| FeedForward::new(store, rng, &format!("{name}.experts.{r}"), c, true))
            .collect();
        let director_ff = FeedForward::new(store, rng, &format!("{name}.director"), c, false);
        let uniform = vec![T::of(1.0 / spec.num_experts as f64); spec.num_experts];
        gema_update(store, &experts, &director_ff, &uniform, T::zero())?;
        Ok(DexBlock {
            norm_attn,
            attn,
            norm_ffn,
            gate: GateState {
                pi,
                freq: uniform,
                sigma: T::one(),
                mu: T::of(spec.mu),
                epsilon: T::of(spec.epsilon),
                top_k: spec.top_k,
            },
            experts,
            director: Director {
                ff: director_ff,
                momentum: T::of(0.99),
            },
            detach_director: true,
        })
    }

    pub fn director_params(&self) -> [ParamId; 4] {
        self.director.ff.params()
    }
}

/// Per-layer quantities held fixed in a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Frozen<T> {
    /// Selected experts, `K` per image.
    pub experts: Vec<usize>,
    /// Director output replacing the live one.
    pub director_out: Option<Tensor<T>>,
}

/// What one block produced in a forward pass.
#[derive(Debug, Clone)]
pub struct BlockOutput<T> {
    pub tokens: Var,
    pub routing: RoutingDecision<T>,
    /// Scores var the routing was taken from.
    pub scores: Var,
    pub director_out: Var,
    pub alignment: Var,
    pub balance: Var,
}

/// `x ← x + attn(norm(x))`, `h ← norm(x)`, route on the mean of `h`,
/// mix experts on `h`, compare with the detached director on `h`, and
/// return `x + f̂^E`. Losses are taken before the residual.
pub fn dex_block_forward<T: Real, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bind: &Binding,
    x: Var,
    block: &DexBlock<T>,
    training: bool,
    rng: &mut R,
    frozen: Option<&Frozen<T>>,
) -> Result<BlockOutput<T>> {
    let a = block.norm_attn.forward(tape, bind, x)?;
    let a = block.attn.forward(tape, bind, a)?;
    let x = tape.add(x, a)?;
    let h = block.norm_ffn.forward(tape, bind, x)?;

    let feature = global_feature(tape, h)?;
    let scores = gate_scores(tape, bind, feature, &block.gate, training, rng)?;
    let routing = match frozen {
        Some(f) => pinned_routing(tape.value(scores), block.gate.top_k, &f.experts)?,
        None => select_top_k(tape.value(scores), block.gate.top_k)?,
    };
    let omega = routing_weights(tape, scores, &routing)?;
    let expert_out = expert_forward(tape, bind, h, &block.experts, &routing, omega)?;
    let fixed = frozen.and_then(|f| f.director_out.as_ref());
    let director_out = if let Some(d) = fixed {
        if d.shape() != tape.shape(h) {
            return Err(DexError::shape(
                "dex_block_forward",
                format!("frozen director output {:?} for tokens {:?}", d.shape(), tape.shape(h)),
            ));
        }
        tape.constant(d.clone())
    } else if block.detach_director {
        director_forward(tape, bind, h, &block.director)?
    } else {
        director_forward_attached(tape, bind, h, &block.director)?
    };
    let alignment = alignment_loss(tape, expert_out, director_out)?;
    let balance = balance_loss(tape, scores, &routing)?;
    let tokens = tape.add(x, expert_out)?;
    Ok(BlockOutput {
        tokens,
        routing,
        scores,
        director_out,
        alignment,
        balance,
    })
}
