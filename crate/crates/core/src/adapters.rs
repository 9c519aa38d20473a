//! Parameter-efficient fine-tuning methods.
//!
//! The input-conditioned adapter ([`ICoNAdapter`]) down-projects the MLP
//! output, lays the tokens out on their patch grid, convolves every channel of
//! every sample with its own `K x K` kernel generated from that sample's
//! pooled features, then applies GeLU and up-projects back to the model width.
//! The remaining types implement the baselines it is compared against.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Ctx, Init, Linear, Owner, ParamId, ParameterRegistry, Role};
use crate::real::Real;
use crate::tape::Var;

pub const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum AdapterKind {
    /// Input-conditioned dynamic adapter after (or beside) the MLP.
    Icon,
    /// Houlsby-style: one bottleneck after attention and one after the MLP.
    BottleneckSequential,
    /// One scaled bottleneck parallel to the MLP.
    AdaptformerParallel,
    /// Low-rank updates on the Q and V projections.
    Lora,
    /// Biases only.
    Bitfit,
    /// LayerNorm affine parameters only.
    LnOnly,
    /// Classification head only.
    LinearProbe,
    Full,
    Frozen,
}

impl AdapterKind {
    pub const ALL: [AdapterKind; 9] = [
        AdapterKind::Icon,
        AdapterKind::BottleneckSequential,
        AdapterKind::AdaptformerParallel,
        AdapterKind::Lora,
        AdapterKind::Bitfit,
        AdapterKind::LnOnly,
        AdapterKind::LinearProbe,
        AdapterKind::Full,
        AdapterKind::Frozen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AdapterKind::Icon => "icon",
            AdapterKind::BottleneckSequential => "bottleneck_sequential",
            AdapterKind::AdaptformerParallel => "adaptformer_parallel",
            AdapterKind::Lora => "lora",
            AdapterKind::Bitfit => "bitfit",
            AdapterKind::LnOnly => "ln_only",
            AdapterKind::LinearProbe => "linear_probe",
            AdapterKind::Full => "full",
            AdapterKind::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter kind {s:?}")))
    }

    /// Kinds that add new modules to the backbone.
    pub fn adds_modules(self) -> bool {
        matches!(
            self,
            AdapterKind::Icon | AdapterKind::BottleneckSequential | AdapterKind::AdaptformerParallel | AdapterKind::Lora
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Placement {
    /// Adapter consumes the MLP output.
    Sequential,
    /// Adapter consumes the MLP input, its output joins the residual sum.
    Parallel,
}

/// Which PEFT method to attach and how.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct AdapterRecipe {
    pub kind: AdapterKind,
    pub bottleneck_dim: usize,
    pub kernel_size: usize,
    pub placement: Placement,
    pub gamma_init: f64,
    /// Sequential icon output is `gamma * x_A + x'` (MLP output reaches the
    /// residual stream only through the adapter). When false the MLP output
    /// is also added back.
    pub eq6_literal: bool,
    pub lora_rank: usize,
}

impl Default for AdapterRecipe {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Icon,
            bottleneck_dim: 64,
            kernel_size: 3,
            placement: Placement::Sequential,
            gamma_init: 1.0,
            eq6_literal: true,
            lora_rank: 8,
        }
    }
}

impl AdapterRecipe {
    pub fn new(kind: AdapterKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn with_dim(mut self, d: usize) -> Self {
        self.bottleneck_dim = d;
        self
    }

    pub fn with_kernel(mut self, k: usize) -> Self {
        self.kernel_size = k;
        self
    }

    pub fn with_placement(mut self, p: Placement) -> Self {
        self.placement = p;
        self
    }

    pub fn with_eq6_literal(mut self, on: bool) -> Self {
        self.eq6_literal = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if self.bottleneck_dim == 0 {
            return Err(Error::Config("bottleneck_dim must be at least 1".into()));
        }
        if self.kind == AdapterKind::Lora && self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be at least 1".into()));
        }
        if !self.gamma_init.is_finite() {
            return Err(Error::Config("gamma_init must be finite".into()));
        }
        Ok(())
    }

    /// Settings that have no effect for this kind.
    pub fn warnings(&self) -> Vec<String> {
        let default = Self::default();
        let mut out = Vec::new();
        if self.kind != AdapterKind::Icon {
            if self.placement != default.placement {
                out.push(format!("placement is ignored for {}", self.kind.as_str()));
            }
            if self.kernel_size != default.kernel_size {
                out.push(format!("kernel_size is ignored for {}", self.kind.as_str()));
            }
        }
        out
    }
}

/// The input-conditioned dynamic adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ICoNAdapter {
    /// `D -> d`.
    pub down: Linear,
    /// Kernel generator, `d -> d*K*K`.
    pub kernel_gen: Linear,
    /// `d -> D`.
    pub up: Linear,
    pub gamma: ParamId,
    pub dim: usize,
    pub kernel_size: usize,
    /// Token grid `(rows, cols)`; rows * cols must equal the token count.
    pub grid: (usize, usize),
    pub placement: Placement,
    pub eq6_literal: bool,
}

impl ICoNAdapter {
    pub fn declare(
        reg: &mut ParameterRegistry,
        prefix: &str,
        embed_dim: usize,
        recipe: &AdapterRecipe,
        grid: (usize, usize),
    ) -> Result<Self> {
        recipe.validate()?;
        let (d, k) = (recipe.bottleneck_dim, recipe.kernel_size);
        let std = Init::Normal(ADAPTER_INIT_STD);
        Ok(Self {
            down: Linear::declare(reg, &format!("{prefix}.down"), embed_dim, d, Owner::Adapter, std)?,
            kernel_gen: Linear::declare(reg, &format!("{prefix}.kernel_gen"), d, d * k * k, Owner::Adapter, std)?,
            up: Linear::declare(reg, &format!("{prefix}.up"), d, embed_dim, Owner::Adapter, Init::Zeros)?,
            gamma: reg.push(format!("{prefix}.gamma"), vec![1], Owner::Adapter, Role::Scale, Init::Value(recipe.gamma_init))?,
            dim: d,
            kernel_size: k,
            grid,
            placement: recipe.placement,
            eq6_literal: recipe.eq6_literal,
        })
    }
}

/// Per-sample kernels from grid features `x_hat: [B, rows, cols, d]`.
///
/// Global average pool over the grid, then one linear map to `d*K*K`, read
/// channel-major as `[B, d, K, K]`.
pub fn generate_kernels<T: Real>(ctx: &mut Ctx<'_, T>, adapter: &ICoNAdapter, x_hat: Var) -> Result<Var> {
    let shape = ctx.tape.shape(x_hat).to_vec();
    let (rows, cols) = adapter.grid;
    if shape.len() != 4 || shape[1] != rows || shape[2] != cols || shape[3] != adapter.dim {
        return Err(Error::Dimension {
            op: "generate_kernels",
            lhs: shape,
            rhs: vec![rows, cols, adapter.dim],
        });
    }
    let b = shape[0];
    let flat = ctx.tape.reshape(x_hat, [b, rows * cols, adapter.dim])?;
    let pooled = ctx.tape.mean_axis(flat, 1)?;
    let raw = adapter.kernel_gen.forward(ctx, pooled)?;
    let k = adapter.kernel_size;
    ctx.tape.reshape(raw, [b, adapter.dim, k, k])
}

/// Adapter output `x_A: [B, M, D]` for input `x: [B, M, D]`.
pub fn icon_forward<T: Real>(ctx: &mut Ctx<'_, T>, adapter: &ICoNAdapter, x: Var) -> Result<Var> {
    let shape = ctx.tape.shape(x).to_vec();
    let (rows, cols) = adapter.grid;
    if shape.len() != 3 || shape[1] != rows * cols {
        return Err(Error::Config(format!(
            "adapter grid {rows}x{cols} does not cover token shape {shape:?}"
        )));
    }
    let (b, m, d) = (shape[0], shape[1], adapter.dim);
    let down = adapter.down.forward(ctx, x)?;
    let x_hat = ctx.tape.reshape(down, [b, rows, cols, d])?;
    let kernels = generate_kernels(ctx, adapter, x_hat)?;
    let planes = ctx.tape.permute(x_hat, &[0, 3, 1, 2])?;
    let conv = ctx.tape.conv2d_depthwise_dynamic(planes, kernels)?;
    let tokens = ctx.tape.permute(conv, &[0, 2, 3, 1])?;
    let tokens = ctx.tape.reshape(tokens, [b, m, d])?;
    let act = ctx.tape.gelu(tokens)?;
    adapter.up.forward(ctx, act)
}

/// Down-projection, GeLU, up-projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bottleneck {
    pub down: Linear,
    pub up: Linear,
}

impl Bottleneck {
    pub fn declare(reg: &mut ParameterRegistry, prefix: &str, embed_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            down: Linear::declare(
                reg,
                &format!("{prefix}.down"),
                embed_dim,
                dim,
                Owner::Adapter,
                Init::Normal(ADAPTER_INIT_STD),
            )?,
            up: Linear::declare(reg, &format!("{prefix}.up"), dim, embed_dim, Owner::Adapter, Init::Zeros)?,
        })
    }
}

/// `up(g(down(x)))`; the caller adds the result to its host branch.
pub fn bottleneck_forward<T: Real>(ctx: &mut Ctx<'_, T>, adapter: &Bottleneck, x: Var) -> Result<Var> {
    let h = adapter.down.forward(ctx, x)?;
    let h = ctx.tape.gelu(h)?;
    adapter.up.forward(ctx, h)
}

/// Parallel bottleneck with a learnable output scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdaptFormerAdapter {
    pub bottleneck: Bottleneck,
    pub scale: ParamId,
}

impl AdaptFormerAdapter {
    pub fn declare(reg: &mut ParameterRegistry, prefix: &str, embed_dim: usize, recipe: &AdapterRecipe) -> Result<Self> {
        Ok(Self {
            bottleneck: Bottleneck::declare(reg, prefix, embed_dim, recipe.bottleneck_dim)?,
            scale: reg.push(format!("{prefix}.scale"), vec![1], Owner::Adapter, Role::Scale, Init::Value(recipe.gamma_init))?,
        })
    }
}

/// Low-rank update `A @ B` for a `D x D` projection; `B` starts at zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraPair {
    /// `[D, r]`.
    pub a: ParamId,
    /// `[r, D]`.
    pub b: ParamId,
}

impl LoraPair {
    pub fn declare(reg: &mut ParameterRegistry, prefix: &str, embed_dim: usize, rank: usize) -> Result<Self> {
        if rank > embed_dim {
            return Err(Error::Config(format!("lora rank {rank} exceeds width {embed_dim}")));
        }
        Ok(Self {
            a: reg.push(
                format!("{prefix}.lora_a"),
                vec![embed_dim, rank],
                Owner::Adapter,
                Role::Weight,
                Init::Normal(ADAPTER_INIT_STD),
            )?,
            b: reg.push(format!("{prefix}.lora_b"), vec![rank, embed_dim], Owner::Adapter, Role::Weight, Init::Zeros)?,
        })
    }
}

/// `x @ (W + A B) + bias`, evaluated as `(x @ W + bias) + (x @ A) @ B`.
pub fn lora_apply<T: Real>(ctx: &mut Ctx<'_, T>, frozen: &Linear, lora: &LoraPair, x: Var) -> Result<Var> {
    let base = frozen.forward(ctx, x)?;
    let a = ctx.param(lora.a)?;
    let b = ctx.param(lora.b)?;
    let low = ctx.tape.matmul(x, a)?;
    let delta = ctx.tape.matmul(low, b)?;
    ctx.tape.add(base, delta)
}

/// Marks the trainable set for `kind`:
///
/// * module-adding kinds: adapter parameters and the head
/// * `bitfit`: every bias and the head
/// * `ln_only`: every LayerNorm affine parameter and the head
/// * `linear_probe`: the head
/// * `full`: everything; `frozen`: nothing
pub fn apply_freeze_policy(registry: &mut ParameterRegistry, kind: AdapterKind) {
    let ids: Vec<ParamId> = registry.ids().collect();
    for id in ids {
        let e = registry.get(id);
        let head = e.owner == Owner::Head;
        let trainable = match kind {
            AdapterKind::Icon | AdapterKind::BottleneckSequential | AdapterKind::AdaptformerParallel | AdapterKind::Lora => {
                head || e.owner == Owner::Adapter
            }
            AdapterKind::Bitfit => head || e.role == Role::Bias,
            AdapterKind::LnOnly => head || e.role == Role::Norm,
            AdapterKind::LinearProbe => head,
            AdapterKind::Full => true,
            AdapterKind::Frozen => false,
        };
        registry.set_trainable(id, trainable);
    }
}
