//! Patch embedding, the stacked DEX encoder, the masked-reconstruction
//! decoder and the combined training objective.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)] // shadowed by inherent methods when std is linked
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dex::{dex_block_forward, BlockOutput, BlockSpec, DexBlock, Frozen, RoutingDecision};
use crate::nn::{rows, Attention, Binding, FeedForward, Linear, Norm, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::{DexError, Real, Result};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields, default))]
pub struct NetworkConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            image_size: 32,
            patch_size: 8,
            channels: 1,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            num_experts: 8,
            top_k: 2,
            decoder_dim: 16,
            decoder_depth: 2,
            decoder_heads: 4,
            mask_ratio: 0.75,
        }
    }
}

impl NetworkConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size.max(1);
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn num_masked(&self) -> usize {
        (self.mask_ratio * self.num_patches() as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: alloc::string::String| Err(DexError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return err(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.channels == 0 || self.depth == 0 {
            return err("channels and depth must be at least 1".into());
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return err(format!("mask_ratio {} outside (0, 1)", self.mask_ratio));
        }
        if self.num_masked() == 0 {
            return err(format!(
                "mask_ratio {} masks no patch out of {}",
                self.mask_ratio,
                self.num_patches()
            ));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return err(format!(
                "top_k {} must be in 1..=num_experts ({})",
                self.top_k, self.num_experts
            ));
        }
        for (name, dim, heads) in [
            ("embed_dim", self.embed_dim, self.heads),
            ("decoder_dim", self.decoder_dim, self.decoder_heads),
        ] {
            if dim == 0 || dim % 4 != 0 {
                return err(format!("{} {} must be a positive multiple of 4", name, dim));
            }
            if heads == 0 || dim % heads != 0 {
                return err(format!("{} {} is not divisible by {} heads", name, dim, heads));
            }
        }
        Ok(())
    }
}

/// Weights of the combined objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub lambda_co: f64,
    pub lambda_bal: f64,
    /// Per-layer alignment factors, shallow to deep.
    pub alpha: Vec<f64>,
}

impl LossWeights {
    pub fn new(depth: usize, lambda_co: f64, lambda_bal: f64) -> Self {
        LossWeights {
            lambda_co,
            lambda_bal,
            alpha: layer_factors(depth),
        }
    }
}

/// `α^l = 1 / (L − (l − 1))` for `l = 1..=L`; the deepest layer gets 1.
pub fn layer_factors(depth: usize) -> Vec<f64> {
    (1..=depth).map(|l| 1.0 / (depth - (l - 1)) as f64).collect()
}

/// `L = (λ_co/L)·Σ α^l L_co^l + (λ_bal/L)·Σ L_bal^l + L_self`.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    loss_self: Var,
    alignment: &[Var],
    balance: &[Var],
    weights: &LossWeights,
) -> Result<Var> {
    let depth = weights.alpha.len();
    if alignment.len() != depth || balance.len() != depth || depth == 0 {
        return Err(DexError::Contract(format!(
            "{} alignment and {} balance terms for depth {}",
            alignment.len(),
            balance.len(),
            depth
        )));
    }
    let l = depth as f64;
    let mut total = loss_self;
    for ((&co, &bal), &alpha) in alignment.iter().zip(balance).zip(&weights.alpha) {
        let co = tape.scale(co, weights.lambda_co / l * alpha);
        total = tape.add(total, co)?;
        let bal = tape.scale(bal, weights.lambda_bal / l);
        total = tape.add(total, bal)?;
    }
    Ok(total)
}

/// Fixed 2-D sine–cosine table `[grid*grid, dim]`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sincos_pos_embed(grid: usize, dim: usize) -> Vec<f64> {
    let quarter = dim / 4;
    let mut out = vec![0.0; grid * grid * dim];
    for row in 0..grid {
        for col in 0..grid {
            let base = (row * grid + col) * dim;
            for (half, pos) in [(0, row), (1, col)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                    let angle = pos as f64 * omega;
                    out[base + half * dim / 2 + i] = angle.sin();
                    out[base + half * dim / 2 + quarter + i] = angle.cos();
                }
            }
        }
    }
    out
}

/// `[B, ch, H, W] -> [B, N, p·p·ch]`, patches in row-major order, pixels
/// ordered (row, column, channel) within a patch.
pub fn patchify<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || patch == 0 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(DexError::Config(format!(
            "cannot cut {:?} into {}x{} patches",
            s, patch, patch
        )));
    }
    let (b, ch, h, w) = (s[0], s[1], s[2], s[3]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * ch;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for py in 0..gh {
            for px in 0..gw {
                for y in 0..patch {
                    for x in 0..patch {
                        for c in 0..ch {
                            let yy = py * patch + y;
                            let xx = px * patch + x;
                            out.push(src[((bi * ch + c) * h + yy) * w + xx]);
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[b, gh * gw, pd], out)
}

/// Per-image split of patch positions into visible and masked sets, both
/// ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSet {
    pub num_patches: usize,
    pub visible: Vec<Vec<usize>>,
    pub masked: Vec<Vec<usize>>,
}

impl MaskSet {
    pub fn batch(&self) -> usize {
        self.visible.len()
    }

    /// Mask that hides exactly the given positions in every image.
    pub fn fixed(batch: usize, num_patches: usize, masked: &[usize]) -> Result<Self> {
        let mut m = masked.to_vec();
        m.sort_unstable();
        m.dedup();
        if m.is_empty() || m.len() >= num_patches || m.iter().any(|&i| i >= num_patches) {
            return Err(DexError::Contract(format!(
                "invalid fixed mask {:?} for {} patches",
                masked, num_patches
            )));
        }
        let v: Vec<usize> = (0..num_patches).filter(|i| !m.contains(i)).collect();
        Ok(MaskSet {
            num_patches,
            visible: vec![v; batch],
            masked: vec![m; batch],
        })
    }
}

/// Removes a uniformly random subset of `⌊ratio·N⌋` positions per image.
pub fn sample_mask<R: Rng + ?Sized>(
    batch: usize,
    num_patches: usize,
    ratio: f64,
    rng: &mut R,
) -> Result<MaskSet> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DexError::Config(format!("mask_ratio {} outside (0, 1)", ratio)));
    }
    let count = (ratio * num_patches as f64).floor() as usize;
    let mut perm: Vec<usize> = (0..num_patches).collect();
    let mut visible = Vec::with_capacity(batch);
    let mut masked = Vec::with_capacity(batch);
    for _ in 0..batch {
        perm.shuffle(rng);
        let mut m = perm[..count].to_vec();
        let mut v = perm[count..].to_vec();
        m.sort_unstable();
        v.sort_unstable();
        masked.push(m);
        visible.push(v);
    }
    Ok(MaskSet {
        num_patches,
        visible,
        masked,
    })
}

/// Keeps the visible tokens of `tokens[B, N, C]`, giving `[B, n_vis, C]`.
pub fn mask_tokens<T: Real>(tape: &mut Tape<T>, tokens: Var, mask: &MaskSet) -> Result<Var> {
    let s = tape.shape(tokens).to_vec();
    if s.len() != 3 || s[0] != mask.batch() || s[1] != mask.num_patches {
        return Err(DexError::shape(
            "mask_tokens",
            format!("tokens {:?} vs mask of {} patches", s, mask.num_patches),
        ));
    }
    let (n, c) = (s[1], s[2]);
    let nv = mask.visible[0].len();
    let mut idx = Vec::with_capacity(s[0] * nv * c);
    for (b, vis) in mask.visible.iter().enumerate() {
        for &p in vis {
            idx.extend((b * n + p) * c..(b * n + p + 1) * c);
        }
    }
    tape.gather(tokens, idx, &[s[0], nv, c])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub norm_attn: Norm,
    pub attn: Attention,
    pub norm_mlp: Norm,
    pub mlp: FeedForward,
}

/// Plain pre-norm transformer decoder predicting pixels of every patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder<T> {
    pub embed: Linear,
    pub mask_token: ParamId,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<DecoderBlock>,
    pub norm: Norm,
    pub head: Linear,
}

/// Encoder, decoder and their parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: NetworkConfig,
    pub params: ParamStore<T>,
    pub patch_embed: Linear,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<DexBlock<T>>,
    pub encoder_norm: Norm,
    pub decoder: Decoder<T>,
}

/// Loss terms of one pretraining forward pass.
#[derive(Debug, Clone)]
pub struct PretrainPass<T> {
    pub loss: Var,
    pub loss_self: Var,
    pub blocks: Vec<BlockOutput<T>>,
}

impl<T: Real> Model<T> {
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let c = config.embed_dim;
        let grid = config.image_size / config.patch_size;
        let n = config.num_patches();
        let patch_embed = Linear::new(&mut params, &mut rng, "patch_embed", config.patch_dim(), c, true);
        let pos_embed = Tensor::from_f64(&[n, c], &sincos_pos_embed(grid, c))?;
        let spec = BlockSpec {
            dim: c,
            heads: config.heads,
            num_experts: config.num_experts,
            top_k: config.top_k,
            mu: 0.99,
            epsilon: 1e-8,
        };
        let blocks = (0..config.depth)
            .map(|l| DexBlock::new(&mut params, &mut rng, &format!("blocks.{l}"), &spec))
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = Norm::new(&mut params, "encoder_norm", c);

        let cd = config.decoder_dim;
        let embed = Linear::new(&mut params, &mut rng, "decoder.embed", c, cd, true);
        let mask_token = params.add("decoder.mask_token", Tensor::zeros(&[cd]), true);
        {
            let tok = params.get_mut(mask_token);
            for v in tok.data_mut() {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                *v = T::of(0.02 * z);
            }
        }
        let dec_blocks = (0..config.decoder_depth)
            .map(|l| {
                let name = format!("decoder.blocks.{l}");
                DecoderBlock {
                    norm_attn: Norm::new(&mut params, &format!("{name}.norm_attn"), cd),
                    attn: Attention::new(&mut params, &mut rng, &format!("{name}.attn"), cd, config.decoder_heads),
                    norm_mlp: Norm::new(&mut params, &format!("{name}.norm_mlp"), cd),
                    mlp: FeedForward::new(&mut params, &mut rng, &format!("{name}.mlp"), cd, true),
                }
            })
            .collect();
        let norm = Norm::new(&mut params, "decoder.norm", cd);
        let head = Linear::new(&mut params, &mut rng, "decoder.head", cd, config.patch_dim(), true);
        let decoder = Decoder {
            embed,
            mask_token,
            pos_embed: Tensor::from_f64(&[n, cd], &sincos_pos_embed(grid, cd))?,
            blocks: dec_blocks,
            norm,
            head,
        };
        Ok(Model {
            config,
            params,
            patch_embed,
            pos_embed,
            blocks,
            encoder_norm,
            decoder,
        })
    }

    /// Linear projection of flattened patches `[B, N, P]` plus the fixed
    /// positional table.
    pub fn patch_embed(&self, tape: &mut Tape<T>, bind: &Binding, patches: Var) -> Result<Var> {
        let s = tape.shape(patches).to_vec();
        if s.len() != 3 || s[1] != self.config.num_patches() || s[2] != self.config.patch_dim() {
            return Err(DexError::shape(
                "patch_embed",
                format!("patches {:?} for config {:?}", s, self.config),
            ));
        }
        let flat = tape.reshape(patches, &[s[0] * s[1], s[2]])?;
        let tokens = self.patch_embed.forward(tape, bind, flat)?;
        let tokens = tape.reshape(tokens, &[s[0], s[1], self.config.embed_dim])?;
        let pos = tape.constant(self.pos_embed.clone());
        tape.add_suffix(tokens, pos)
    }

    /// Runs the DEX stack and the final norm. `frozen` fixes the expert
    /// selection, and optionally the director output, of each layer.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        tokens: Var,
        training: bool,
        rng: &mut R,
        frozen: Option<&[Frozen<T>]>,
    ) -> Result<(Var, Vec<BlockOutput<T>>)> {
        if let Some(p) = frozen {
            if p.len() != self.blocks.len() {
                return Err(DexError::Contract(format!(
                    "{} frozen layers for depth {}",
                    p.len(),
                    self.blocks.len()
                )));
            }
        }
        let mut x = tokens;
        let mut records = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let out = dex_block_forward(tape, bind, x, block, training, rng, frozen.map(|f| &f[l]))?;
            x = out.tokens;
            records.push(out);
        }
        let x = self.encoder_norm.forward(tape, bind, x)?;
        Ok((x, records))
    }

    /// Mean squared pixel error on masked patches only.
    pub fn decode_and_reconstruct(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        features: Var,
        mask: &MaskSet,
        targets: &Tensor<T>,
    ) -> Result<Var> {
        let s = tape.shape(features).to_vec();
        let (b, nv) = (s[0], s[1]);
        let n = mask.num_patches;
        let cd = self.config.decoder_dim;
        let pd = self.config.patch_dim();
        let dec = &self.decoder;

        let x = rows(tape, features)?;
        let y = dec.embed.forward(tape, bind, x)?;
        let tok = tape.reshape(bind.var(dec.mask_token), &[1, cd])?;
        let pool = tape.concat(&[y, tok])?;
        let mut idx = Vec::with_capacity(b * n * cd);
        for bi in 0..b {
            let mut vis = mask.visible[bi].iter().peekable();
            let mut j = 0;
            for p in 0..n {
                let row = if vis.peek() == Some(&&p) {
                    vis.next();
                    j += 1;
                    bi * nv + j - 1
                } else {
                    b * nv
                };
                idx.extend(row * cd..(row + 1) * cd);
            }
        }
        let mut x = tape.gather(pool, idx, &[b, n, cd])?;
        let pos = tape.constant(dec.pos_embed.clone());
        x = tape.add_suffix(x, pos)?;
        for blk in &dec.blocks {
            let a = blk.norm_attn.forward(tape, bind, x)?;
            let a = blk.attn.forward(tape, bind, a)?;
            x = tape.add(x, a)?;
            let h = blk.norm_mlp.forward(tape, bind, x)?;
            let h = rows(tape, h)?;
            let h = blk.mlp.forward(tape, bind, h)?;
            let h = tape.reshape(h, &[b, n, cd])?;
            x = tape.add(x, h)?;
        }
        let x = dec.norm.forward(tape, bind, x)?;
        let x = rows(tape, x)?;
        let pred = dec.head.forward(tape, bind, x)?;

        let nm = mask.masked[0].len();
        let mut pick = Vec::with_capacity(b * nm * pd);
        for (bi, m) in mask.masked.iter().enumerate() {
            for &p in m {
                pick.extend((bi * n + p) * pd..(bi * n + p + 1) * pd);
            }
        }
        let pred = tape.gather(pred, pick.clone(), &[b, nm, pd])?;
        let target = tape.constant(targets.clone());
        let target = tape.gather(target, pick, &[b, nm, pd])?;
        tape.mse(pred, target)
    }

    /// Full masked-reconstruction forward pass with the combined loss.
    #[allow(clippy::too_many_arguments)]
    pub fn pretrain_forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bind: &Binding,
        images: &Tensor<T>,
        mask: &MaskSet,
        training: bool,
        rng: &mut R,
        frozen: Option<&[Frozen<T>]>,
        weights: &LossWeights,
    ) -> Result<PretrainPass<T>> {
        let patches = patchify(images, self.config.patch_size)?;
        let pv = tape.constant(patches.clone());
        let tokens = self.patch_embed(tape, bind, pv)?;
        let visible = mask_tokens(tape, tokens, mask)?;
        let (features, blocks) = self.encode(tape, bind, visible, training, rng, frozen)?;
        let loss_self = self.decode_and_reconstruct(tape, bind, features, mask, &patches)?;
        let co: Vec<Var> = blocks.iter().map(|b| b.alignment).collect();
        let bal: Vec<Var> = blocks.iter().map(|b| b.balance).collect();
        let loss = total_loss(tape, loss_self, &co, &bal, weights)?;
        Ok(PretrainPass {
            loss,
            loss_self,
            blocks,
        })
    }

    /// Eval-mode encoder over all patches. Returns mean-pooled final features
    /// `[B, C]` and each layer's routing.
    pub fn encode_eval(&self, images: &Tensor<T>) -> Result<(Tensor<T>, Vec<RoutingDecision<T>>)> {
        let mut tape = Tape::new();
        let bind = Binding::with(&mut tape, &self.params, |_| false);
        let patches = patchify(images, self.config.patch_size)?;
        let pv = tape.constant(patches);
        let tokens = self.patch_embed(&mut tape, &bind, pv)?;
        // eval draws no noise
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (features, records) = self.encode(&mut tape, &bind, tokens, false, &mut rng, None)?;
        let pooled = tape.mean_axis(features, 1)?;
        Ok((
            tape.value(pooled).clone(),
            records.into_iter().map(|r| r.routing).collect(),
        ))
    }

    pub fn pooled_features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.encode_eval(images)?.0)
    }

    /// Every director parameter id across layers.
    pub fn director_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.director_params()).collect()
    }
}
