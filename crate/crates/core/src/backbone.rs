//! Compact pre-norm ViT encoder and attention rollout.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::adapters::{
    bottleneck_forward, icon_forward, lora_apply, AdaptFormerAdapter, Bottleneck, ICoNAdapter, LoraPair, Placement,
};
use crate::error::{Error, Result};
use crate::params::{Ctx, LayerNormParams, Linear};
use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ViTConfig {
    /// Square input side, in pixels.
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    /// MLP hidden width is `mlp_ratio * embed_dim`.
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub ln_eps: f64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ViTConfig {
    /// ViT-B/16 geometry, used for parameter accounting.
    pub fn vitb_like() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4,
            num_classes: 100,
            ln_eps: 1e-6,
        }
    }

    /// Desk-scale model for training and gradient suites.
    pub fn tiny() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 64,
            depth: 4,
            num_heads: 4,
            mlp_ratio: 4,
            num_classes: 4,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::Config("model.ln_eps must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid side `H / P`.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_side(), self.grid_side())
    }

    /// Token count `M = H W / P^2`.
    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.embed_dim
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn image_numel(&self) -> usize {
        self.in_channels * self.image_size * self.image_size
    }
}

/// Adapter modules attached to one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub enum BlockAdapter {
    Icon(ICoNAdapter),
    /// Houlsby placement: one bottleneck on each sub-block's output.
    Bottleneck { attn: Bottleneck, mlp: Bottleneck },
    AdaptFormer(AdaptFormerAdapter),
    Lora { q: LoraPair, v: LoraPair },
}

/// One encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNormParams,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNormParams,
    pub fc1: Linear,
    pub fc2: Linear,
    pub num_heads: usize,
    pub ln_eps: f64,
    pub adapter: Option<BlockAdapter>,
}

/// `[B, C, H, W]` pixels to `[B, M, P*P*C]` patch rows, token-major over the grid.
pub fn patchify<T: Real>(ctx: &mut Ctx<'_, T>, images: Var, cfg: &ViTConfig) -> Result<Var> {
    let shape = ctx.tape.shape(images).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels || shape[2] != cfg.image_size || shape[3] != cfg.image_size {
        return Err(Error::Config(format!(
            "image batch {shape:?} does not match model input [B, {}, {}, {}]",
            cfg.in_channels, cfg.image_size, cfg.image_size
        )));
    }
    let (b, c, p, g) = (shape[0], cfg.in_channels, cfg.patch_size, cfg.grid_side());
    let x = ctx.tape.reshape(images, [b, c, g, p, g, p])?;
    let x = ctx.tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    ctx.tape.reshape(x, [b, g * g, c * p * p])
}

/// Non-overlapping patches, linear embedding and positional embedding.
pub fn patch_embed<T: Real>(
    ctx: &mut Ctx<'_, T>,
    images: Var,
    cfg: &ViTConfig,
    proj: &Linear,
    pos: crate::params::ParamId,
) -> Result<Var> {
    let patches = patchify(ctx, images, cfg)?;
    let tokens = proj.forward(ctx, patches)?;
    let pos = ctx.param(pos)?;
    ctx.tape.add(tokens, pos)
}

fn project<T: Real>(ctx: &mut Ctx<'_, T>, lin: &Linear, lora: Option<&LoraPair>, x: Var) -> Result<Var> {
    match lora {
        Some(pair) => lora_apply(ctx, lin, pair, x),
        None => lin.forward(ctx, x),
    }
}

/// `x' = Attention(LN(x)) + x`. Returns `x'` and, when requested, the
/// head-averaged attention `[B, M, M]`.
pub fn attention_sub_block<T: Real>(
    ctx: &mut Ctx<'_, T>,
    block: &Block,
    x: Var,
    record: bool,
) -> Result<(Var, Option<Tensor<T>>)> {
    let shape = ctx.tape.shape(x).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "attention_sub_block",
            lhs: shape,
            rhs: vec![3],
        });
    }
    let (b, m, d) = (shape[0], shape[1], shape[2]);
    let heads = block.num_heads;
    let dh = d / heads;
    let (lora_q, lora_v) = match &block.adapter {
        Some(BlockAdapter::Lora { q, v }) => (Some(q), Some(v)),
        _ => (None, None),
    };
    let h = block.ln1.forward(ctx, x, block.ln_eps)?;
    let q = project(ctx, &block.q, lora_q, h)?;
    let k = block.k.forward(ctx, h)?;
    let v = project(ctx, &block.v, lora_v, h)?;
    let q = ctx.tape.reshape(q, [b, m, heads, dh])?;
    let q = ctx.tape.permute(q, &[0, 2, 1, 3])?;
    let k = ctx.tape.reshape(k, [b, m, heads, dh])?;
    let kt = ctx.tape.permute(k, &[0, 2, 3, 1])?;
    let v = ctx.tape.reshape(v, [b, m, heads, dh])?;
    let v = ctx.tape.permute(v, &[0, 2, 1, 3])?;
    let scores = ctx.tape.matmul(q, kt)?;
    let scores = ctx.tape.scale(scores, T::ONE / T::from_usize(dh).sqrt())?;
    let probs = ctx.tape.softmax(scores)?;
    let attn_map = record.then(|| head_average(ctx.tape.value(probs), b, heads, m));
    let mixed = ctx.tape.matmul(probs, v)?;
    let mixed = ctx.tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = ctx.tape.reshape(mixed, [b, m, d])?;
    let mut out = block.o.forward(ctx, mixed)?;
    if let Some(BlockAdapter::Bottleneck { attn, .. }) = &block.adapter {
        let delta = bottleneck_forward(ctx, attn, out)?;
        out = ctx.tape.add(out, delta)?;
    }
    let x_prime = ctx.tape.add(x, out)?;
    Ok((x_prime, attn_map))
}

fn head_average<T: Real>(probs: &[T], b: usize, heads: usize, m: usize) -> Tensor<T> {
    let mut out = vec![T::ZERO; b * m * m];
    let inv = T::ONE / T::from_usize(heads);
    for s in 0..b {
        let dst = &mut out[s * m * m..(s + 1) * m * m];
        for h in 0..heads {
            let src = &probs[(s * heads + h) * m * m..(s * heads + h + 1) * m * m];
            dst.iter_mut().zip(src).for_each(|(o, &p)| *o += p);
        }
        dst.iter_mut().for_each(|o| *o *= inv);
    }
    Tensor::new([b, m, m], out).expect("attention map extents")
}

/// MLP sub-block with whatever adapter the block carries.
///
/// * no adapter: `x_out = MLP(LN(x')) + x'`
/// * icon, sequential, literal: `x_out = gamma * icon(MLP(LN(x'))) + x'`
/// * icon, sequential, residual: `x_out = (MLP(LN(x')) + x') + gamma * icon(MLP(LN(x')))`
/// * icon, parallel: `x_out = (MLP(LN(x')) + x') + gamma * icon(LN(x'))`
pub fn mlp_sub_block<T: Real>(ctx: &mut Ctx<'_, T>, block: &Block, x_prime: Var) -> Result<Var> {
    let h = block.ln2.forward(ctx, x_prime, block.ln_eps)?;
    let hidden = block.fc1.forward(ctx, h)?;
    let hidden = ctx.tape.gelu(hidden)?;
    let mut x_tilde = block.fc2.forward(ctx, hidden)?;
    match &block.adapter {
        None | Some(BlockAdapter::Lora { .. }) => ctx.tape.add(x_tilde, x_prime),
        Some(BlockAdapter::Bottleneck { mlp, .. }) => {
            let delta = bottleneck_forward(ctx, mlp, x_tilde)?;
            x_tilde = ctx.tape.add(x_tilde, delta)?;
            ctx.tape.add(x_tilde, x_prime)
        }
        Some(BlockAdapter::AdaptFormer(a)) => {
            let base = ctx.tape.add(x_tilde, x_prime)?;
            let delta = bottleneck_forward(ctx, &a.bottleneck, h)?;
            let s = ctx.param(a.scale)?;
            let delta = ctx.tape.mul(delta, s)?;
            ctx.tape.add(base, delta)
        }
        Some(BlockAdapter::Icon(a)) => {
            let gamma = ctx.param(a.gamma)?;
            match a.placement {
                Placement::Sequential => {
                    let x_a = icon_forward(ctx, a, x_tilde)?;
                    let gated = ctx.tape.mul(x_a, gamma)?;
                    if a.eq6_literal {
                        ctx.tape.add(gated, x_prime)
                    } else {
                        let base = ctx.tape.add(x_tilde, x_prime)?;
                        ctx.tape.add(base, gated)
                    }
                }
                Placement::Parallel => {
                    let base = ctx.tape.add(x_tilde, x_prime)?;
                    let x_a = icon_forward(ctx, a, h)?;
                    let gated = ctx.tape.mul(x_a, gamma)?;
                    ctx.tape.add(base, gated)
                }
            }
        }
    }
}

/// Head-averaged attention of one block for one image, `M x M`, row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    tokens: usize,
    data: Vec<f64>,
}

impl AttentionRecord {
    pub fn new(tokens: usize, data: Vec<f64>) -> Result<Self> {
        if tokens == 0 || data.len() != tokens * tokens {
            return Err(Error::Validation(format!(
                "attention record needs {tokens}x{tokens} values, got {}",
                data.len()
            )));
        }
        Ok(Self { tokens, data })
    }

    /// Splits a `[B, M, M]` map into one record per sample.
    pub fn from_batch<T: Real>(map: &Tensor<T>) -> Result<Vec<Self>> {
        let s = map.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Validation(format!("attention map must be [B, M, M], got {s:?}")));
        }
        let m = s[1];
        map.data()
            .chunks_exact(m * m)
            .map(|c| Self::new(m, c.iter().map(|v| v.to_f64()).collect()))
            .collect()
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

const STOCHASTIC_TOL: f64 = 1e-4;

/// Rollout over layers: each layer is mixed with the identity as
/// `0.5 A + 0.5 I`, rows renormalized, and the result is the product
/// `A_N ... A_1`.
pub fn attention_rollout(records: &[AttentionRecord]) -> Result<Tensor<f64>> {
    let first = records.first().ok_or_else(|| Error::Validation("rollout needs at least one layer".into()))?;
    let m = first.tokens;
    for (l, r) in records.iter().enumerate() {
        if r.tokens != m {
            return Err(Error::Validation(format!("layer {l} has {} tokens, expected {m}", r.tokens)));
        }
        for (row, vals) in r.data.chunks_exact(m).enumerate() {
            let total: f64 = vals.iter().sum();
            if vals.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) || (total - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Validation(format!("layer {l} row {row} is not stochastic (sum {total})")));
            }
        }
    }
    let mut acc = identity(m);
    for r in records {
        let mut mixed: Vec<f64> = r.data.iter().map(|&v| 0.5 * v).collect();
        for i in 0..m {
            mixed[i * m + i] += 0.5;
        }
        for row in mixed.chunks_exact_mut(m) {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= total);
        }
        acc = square_matmul(&mixed, &acc, m);
    }
    Tensor::new([m, m], acc)
}

fn identity(m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        out[i * m + i] = 1.0;
    }
    out
}

fn square_matmul(a: &[f64], b: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * m];
    crate::kernels::gemm(m, m, m, a, false, b, false, &mut out, false);
    out
}
