//! Named parameters, their freeze flags and exact counting.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

/// Index of a parameter inside a [`ParameterRegistry`] / [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Owner {
    Backbone,
    Adapter,
    Head,
}

impl Owner {
    pub fn as_str(self) -> &'static str {
        match self {
            Owner::Backbone => "backbone",
            Owner::Adapter => "adapter",
            Owner::Head => "head",
        }
    }
}

/// What a parameter does; drives freeze policies and weight-decay exclusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Role {
    Weight,
    Bias,
    /// LayerNorm affine parameters.
    Norm,
    /// Learnable scalar gates (adapter gamma, AdaptFormer scale).
    Scale,
    Embedding,
}

impl Role {
    pub fn decays(self) -> bool {
        matches!(self, Role::Weight | Role::Embedding)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Normal(f64),
    Zeros,
    Ones,
    Value(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistryEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub owner: Owner,
    pub role: Role,
    pub init: Init,
}

impl RegistryEntry {
    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountScope {
    All,
    Trainable,
    Frozen,
    /// Trainable parameters that belong to the backbone itself.
    BackboneTrainable,
}

/// Ordered list of every model parameter with its trainable flag.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterRegistry {
    entries: Vec<RegistryEntry>,
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: String, shape: Vec<usize>, owner: Owner, role: Role, init: Init) -> Result<ParamId> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.entries.push(RegistryEntry {
            name,
            shape,
            trainable: true,
            owner,
            role,
            init,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &RegistryEntry {
        &self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.iter_mut().for_each(|e| e.trainable = trainable);
    }

    pub fn count(&self, scope: CountScope) -> usize {
        self.entries
            .iter()
            .filter(|e| match scope {
                CountScope::All => true,
                CountScope::Trainable => e.trainable,
                CountScope::Frozen => !e.trainable,
                CountScope::BackboneTrainable => e.trainable && e.owner == Owner::Backbone,
            })
            .map(RegistryEntry::numel)
            .sum()
    }

    /// Trainable share of all parameters, in percent.
    pub fn trainable_percent(&self) -> f64 {
        let total = self.count(CountScope::All);
        if total == 0 {
            return 0.0;
        }
        100.0 * self.count(CountScope::Trainable) as f64 / total as f64
    }

    /// `(total, trainable)` per owner.
    pub fn by_owner(&self, owner: Owner) -> (usize, usize) {
        self.entries.iter().filter(|e| e.owner == owner).fold((0, 0), |(t, tr), e| {
            (t + e.numel(), tr + if e.trainable { e.numel() } else { 0 })
        })
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }
}

/// Parameter values for a registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    registry: ParameterRegistry,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    /// Allocates and initializes every registry entry from `seed`.
    ///
    /// Each parameter draws from its own stream keyed by its position, so
    /// adding parameters at the end of the registry never perturbs earlier ones.
    pub fn init(registry: ParameterRegistry, seed: u64) -> Self {
        let tensors = registry
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| init_tensor(e, seed, i as u64))
            .collect();
        Self { registry, tensors }
    }

    pub fn from_parts(registry: ParameterRegistry, tensors: Vec<Tensor<T>>) -> Result<Self> {
        if registry.len() != tensors.len() {
            return dim_err("param_store", &[registry.len()], &[tensors.len()]);
        }
        for (e, t) in registry.entries.iter().zip(&tensors) {
            if e.shape != t.shape() {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
        }
        Ok(Self { registry, tensors })
    }

    pub fn registry(&self) -> &ParameterRegistry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut ParameterRegistry {
        &mut self.registry
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.registry.find(name).map(|id| &self.tensors[id.0])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.registry.find(name).map(move |id| &mut self.tensors[id.0])
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            registry: self.registry.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Concatenated values of the given parameters.
    pub fn flatten(&self, ids: &[ParamId]) -> Vec<T> {
        ids.iter().flat_map(|id| self.tensors[id.0].data().iter().copied()).collect()
    }

    pub fn flatten_grads(&self, ids: &[ParamId]) -> Vec<T> {
        ids.iter()
            .flat_map(|id| {
                let t = &self.tensors[id.0];
                match t.grad() {
                    Some(g) => g.to_vec(),
                    None => alloc::vec![T::ZERO; t.numel()],
                }
            })
            .collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn assign(&mut self, ids: &[ParamId], values: &[T]) -> Result<()> {
        let needed: usize = ids.iter().map(|id| self.tensors[id.0].numel()).sum();
        if needed != values.len() {
            return dim_err("assign", &[needed], &[values.len()]);
        }
        let mut offset = 0;
        for id in ids {
            let dst = self.tensors[id.0].data_mut();
            dst.copy_from_slice(&values[offset..offset + dst.len()]);
            offset += dst.len();
        }
        Ok(())
    }
}

fn init_tensor<T: Real>(e: &RegistryEntry, seed: u64, stream: u64) -> Tensor<T> {
    match e.init {
        Init::Zeros => Tensor::zeros(e.shape.clone()),
        Init::Ones => Tensor::full(e.shape.clone(), T::ONE),
        Init::Value(v) => Tensor::full(e.shape.clone(), T::from_f64(v)),
        Init::Normal(std) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            let dist = Normal::new(0.0, std).expect("init std is finite and non-negative");
            let data = (0..e.numel()).map(|_| T::from_f64(dist.sample(&mut rng))).collect();
            Tensor::new(e.shape.clone(), data).expect("shape/data agree by construction")
        }
    }
}

/// Parameter-to-tape binding for one forward pass.
///
/// Parameters become tape leaves on first use; only trainable ones request
/// gradients.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        let n = store.registry.len();
        Self {
            tape,
            store,
            bound: alloc::vec![None; n],
        }
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        let t = &self.store.tensors[id.0];
        let trainable = self.store.registry.entries[id.0].trainable;
        let v = self.tape.input(t.shape().to_vec(), t.data().to_vec(), trainable)?;
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Tape variables bound to parameters during this pass.
    pub fn into_bindings(self) -> Bindings {
        Bindings(self.bound)
    }
}

/// Mapping from parameters to the tape leaves they were bound to.
#[derive(Debug, Clone)]
pub struct Bindings(Vec<Option<Var>>);

impl Bindings {
    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.0.get(id.0).copied().flatten()
    }

    /// Adds the tape's leaf gradients into the store's gradient buffers.
    pub fn accumulate_into<T: Real>(&self, tape: &Tape<T>, store: &mut ParamStore<T>) -> Result<()> {
        for (i, v) in self.0.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = tape.grad(*v) {
                    store.tensors[i].accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}

/// Weight `[in, out]` plus bias `[out]`, applied as `x @ w + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn declare(
        reg: &mut ParameterRegistry,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        owner: Owner,
        weight_init: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: reg.push(format!("{prefix}.weight"), alloc::vec![fan_in, fan_out], owner, Role::Weight, weight_init)?,
            bias: reg.push(format!("{prefix}.bias"), alloc::vec![fan_out], owner, Role::Bias, Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight)?;
        let b = ctx.param(self.bias)?;
        ctx.tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn declare(reg: &mut ParameterRegistry, prefix: &str, dim: usize, owner: Owner) -> Result<Self> {
        Ok(Self {
            gamma: reg.push(format!("{prefix}.weight"), alloc::vec![dim], owner, Role::Norm, Init::Ones)?,
            beta: reg.push(format!("{prefix}.bias"), alloc::vec![dim], owner, Role::Norm, Init::Zeros)?,
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, eps: f64) -> Result<Var> {
        let g = ctx.param(self.gamma)?;
        let b = ctx.param(self.beta)?;
        ctx.tape.layer_norm(x, g, b, T::from_f64(eps))
    }
}
