//! Backbone plus attached adapters, with a parameter store.

use alloc::format;
use alloc::vec::Vec;

use crate::adapters::{apply_freeze_policy, AdaptFormerAdapter, AdapterKind, AdapterRecipe, Bottleneck, ICoNAdapter, LoraPair};
use crate::backbone::{attention_sub_block, mlp_sub_block, patch_embed, Block, BlockAdapter, ViTConfig};
use crate::error::{Error, Result};
use crate::params::{Bindings, CountScope, Ctx, Init, LayerNormParams, Linear, Owner, ParamId, ParamStore, ParameterRegistry, Role};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Backbone and ViT init std for weights and positional embedding.
pub const BACKBONE_INIT_STD: f64 = 0.02;

/// Parameter handles for a model; carries no values.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub cfg: ViTConfig,
    pub recipe: AdapterRecipe,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
    pub norm: LayerNormParams,
    pub head: Linear,
}

impl Architecture {
    /// Declares every parameter and applies the recipe's freeze policy.
    pub fn declare(cfg: &ViTConfig, recipe: &AdapterRecipe) -> Result<(Self, ParameterRegistry)> {
        cfg.validate()?;
        recipe.validate()?;
        let mut reg = ParameterRegistry::new();
        let std = Init::Normal(BACKBONE_INIT_STD);
        let d = cfg.embed_dim;
        let patch = Linear::declare(&mut reg, "patch_embed", cfg.patch_dim(), d, Owner::Backbone, std)?;
        let pos = reg.push("pos_embed".into(), alloc::vec![cfg.num_tokens(), d], Owner::Backbone, Role::Embedding, std)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("blocks.{i}");
            let ln1 = LayerNormParams::declare(&mut reg, &format!("{p}.ln1"), d, Owner::Backbone)?;
            let q = Linear::declare(&mut reg, &format!("{p}.attn.q"), d, d, Owner::Backbone, std)?;
            let k = Linear::declare(&mut reg, &format!("{p}.attn.k"), d, d, Owner::Backbone, std)?;
            let v = Linear::declare(&mut reg, &format!("{p}.attn.v"), d, d, Owner::Backbone, std)?;
            let o = Linear::declare(&mut reg, &format!("{p}.attn.o"), d, d, Owner::Backbone, std)?;
            let ln2 = LayerNormParams::declare(&mut reg, &format!("{p}.ln2"), d, Owner::Backbone)?;
            let fc1 = Linear::declare(&mut reg, &format!("{p}.mlp.fc1"), d, cfg.mlp_hidden(), Owner::Backbone, std)?;
            let fc2 = Linear::declare(&mut reg, &format!("{p}.mlp.fc2"), cfg.mlp_hidden(), d, Owner::Backbone, std)?;
            let adapter = declare_adapter(&mut reg, &p, cfg, recipe)?;
            blocks.push(Block {
                ln1,
                q,
                k,
                v,
                o,
                ln2,
                fc1,
                fc2,
                num_heads: cfg.num_heads,
                ln_eps: cfg.ln_eps,
                adapter,
            });
        }
        let norm = LayerNormParams::declare(&mut reg, "norm", d, Owner::Backbone)?;
        let head = Linear::declare(&mut reg, "head", d, cfg.num_classes, Owner::Head, std)?;
        apply_freeze_policy(&mut reg, recipe.kind);
        let arch = Self {
            cfg: cfg.clone(),
            recipe: recipe.clone(),
            patch,
            pos,
            blocks,
            norm,
            head,
        };
        Ok((arch, reg))
    }
}

fn declare_adapter(
    reg: &mut ParameterRegistry,
    prefix: &str,
    cfg: &ViTConfig,
    recipe: &AdapterRecipe,
) -> Result<Option<BlockAdapter>> {
    let d = cfg.embed_dim;
    Ok(match recipe.kind {
        AdapterKind::Icon => Some(BlockAdapter::Icon(ICoNAdapter::declare(
            reg,
            &format!("{prefix}.adapter"),
            d,
            recipe,
            cfg.grid(),
        )?)),
        AdapterKind::BottleneckSequential => Some(BlockAdapter::Bottleneck {
            attn: Bottleneck::declare(reg, &format!("{prefix}.adapter_attn"), d, recipe.bottleneck_dim)?,
            mlp: Bottleneck::declare(reg, &format!("{prefix}.adapter_mlp"), d, recipe.bottleneck_dim)?,
        }),
        AdapterKind::AdaptformerParallel => Some(BlockAdapter::AdaptFormer(AdaptFormerAdapter::declare(
            reg,
            &format!("{prefix}.adapter"),
            d,
            recipe,
        )?)),
        AdapterKind::Lora => Some(BlockAdapter::Lora {
            q: LoraPair::declare(reg, &format!("{prefix}.attn.q"), d, recipe.lora_rank)?,
            v: LoraPair::declare(reg, &format!("{prefix}.attn.v"), d, recipe.lora_rank)?,
        }),
        _ => None,
    })
}

/// Trainable-parameter registry for `cfg` + `recipe` without allocating weights.
pub fn parameter_registry(cfg: &ViTConfig, recipe: &AdapterRecipe) -> Result<ParameterRegistry> {
    Architecture::declare(cfg, recipe).map(|(_, reg)| reg)
}

/// Exact parameter count for a scope.
pub fn count_parameters(registry: &ParameterRegistry, scope: CountScope) -> usize {
    registry.count(scope)
}

/// Output of one forward pass.
pub struct Forward<T> {
    pub logits: Var,
    pub bindings: Bindings,
    /// Per block, head-averaged attention `[B, M, M]` (empty unless requested).
    pub attention: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Builds the model with seeded initialization and the recipe's freeze policy.
    pub fn new(cfg: &ViTConfig, recipe: &AdapterRecipe, seed: u64) -> Result<Self> {
        let (arch, reg) = Architecture::declare(cfg, recipe)?;
        Ok(Self {
            arch,
            store: ParamStore::init(reg, seed),
        })
    }

    pub fn cfg(&self) -> &ViTConfig {
        &self.arch.cfg
    }

    pub fn recipe(&self) -> &AdapterRecipe {
        &self.arch.recipe
    }

    pub fn registry(&self) -> &ParameterRegistry {
        self.store.registry()
    }

    /// Re-applies a freeze policy to the live registry.
    pub fn apply_freeze_policy(&mut self, kind: AdapterKind) -> &ParameterRegistry {
        apply_freeze_policy(self.store.registry_mut(), kind);
        self.store.registry()
    }

    /// Copies every backbone and head tensor from `source` by name.
    ///
    /// Used to start a fine-tuning run from pretrained weights; adapter
    /// parameters keep their own initialization.
    pub fn load_backbone_from(&mut self, source: &Model<T>) -> Result<()> {
        let ids: Vec<ParamId> = self.store.registry().ids().collect();
        for id in ids {
            let e = self.store.registry().get(id).clone();
            if e.owner == Owner::Adapter {
                continue;
            }
            let Some(src) = source.store.by_name(&e.name) else {
                return Err(Error::Validation(format!("source model has no parameter {}", e.name)));
            };
            if src.shape() != e.shape.as_slice() {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?} in source, expected {:?}",
                    e.name,
                    src.shape(),
                    e.shape
                )));
            }
            self.store.get_mut(id).data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    fn images_var(&self, tape: &mut Tape<T>, images: &Tensor<T>) -> Result<Var> {
        tape.input(images.shape().to_vec(), images.data().to_vec(), false)
    }

    /// patch embedding, N blocks, final LayerNorm, token mean-pool, head.
    pub fn forward(&self, tape: &mut Tape<T>, images: &Tensor<T>, record_attention: bool) -> Result<Forward<T>> {
        let img = self.images_var(tape, images)?;
        let mut ctx = Ctx::new(tape, &self.store);
        let (logits, attention) = self.forward_ctx(&mut ctx, img, record_attention)?;
        Ok(Forward {
            logits,
            bindings: ctx.into_bindings(),
            attention,
        })
    }

    pub fn forward_ctx(&self, ctx: &mut Ctx<'_, T>, images: Var, record_attention: bool) -> Result<(Var, Vec<Tensor<T>>)> {
        let a = &self.arch;
        let mut x = patch_embed(ctx, images, &a.cfg, &a.patch, a.pos)?;
        let mut attention = Vec::new();
        for block in &a.blocks {
            let (x_prime, map) = attention_sub_block(ctx, block, x, record_attention)?;
            attention.extend(map);
            x = mlp_sub_block(ctx, block, x_prime)?;
        }
        let x = a.norm.forward(ctx, x, a.cfg.ln_eps)?;
        let pooled = ctx.tape.mean_axis(x, 1)?;
        let logits = a.head.forward(ctx, pooled)?;
        Ok((logits, attention))
    }

    /// Forward without gradient tracking, returning the logits tensor.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, false)?;
        Ok(tape.to_tensor(out.logits))
    }

    /// Mean cross-entropy and its gradients, accumulated into the store.
    pub fn loss_and_grad(&mut self, images: &Tensor<T>, labels: &[usize]) -> Result<T> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, images, false)?;
        let loss = tape.cross_entropy(out.logits, labels)?;
        let value = tape.value(loss)[0];
        tape.backward(loss)?;
        out.bindings.accumulate_into(&tape, &mut self.store)?;
        Ok(value)
    }
}
