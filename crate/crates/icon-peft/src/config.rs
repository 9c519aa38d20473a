//! JSON run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use icon_peft_core::adapters::AdapterRecipe;
use icon_peft_core::backbone::ViTConfig;
use icon_peft_core::train::TrainConfig;
use serde::de::{self, Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize, Serializer};

use crate::error::{CliError, CliResult};

/// Named model geometries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// ViT-B/16 geometry with a 100-class head; parameter accounting only.
    VitbLike,
    /// Desk-scale model for training suites.
    Tiny,
    /// Small enough for exhaustive gradient checks (D = 32, N = 2).
    GradTiny,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::VitbLike, Preset::Tiny, Preset::GradTiny];

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::VitbLike => "vitb-like",
            Preset::Tiny => "tiny",
            Preset::GradTiny => "grad-tiny",
        }
    }

    pub fn parse(s: &str) -> CliResult<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| CliError::Config(format!("unknown preset `{s}` (expected vitb-like, tiny or grad-tiny)")))
    }

    pub fn model(self) -> ViTConfig {
        match self {
            Preset::VitbLike => ViTConfig::vitb_like(),
            Preset::Tiny => ViTConfig::tiny(),
            Preset::GradTiny => ViTConfig {
                image_size: 16,
                patch_size: 4,
                in_channels: 3,
                embed_dim: 32,
                depth: 2,
                num_heads: 4,
                mlp_ratio: 2,
                num_classes: 4,
                ln_eps: 1e-6,
            },
        }
    }

    /// Full run configuration for the preset.
    pub fn run_config(self) -> RunConfig {
        let mut cfg = RunConfig {
            model: ModelSpec::Preset(self),
            ..RunConfig::default()
        };
        if self == Preset::GradTiny {
            cfg.recipe.bottleneck_dim = 8;
            cfg.recipe.lora_rank = 4;
        }
        cfg
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Either a preset name (`"tiny"`) or an explicit object; missing object
/// fields take the `tiny` values.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelSpec {
    Preset(Preset),
    Custom(ViTConfig),
}

impl ModelSpec {
    pub fn resolve(&self) -> ViTConfig {
        match self {
            ModelSpec::Preset(p) => p.model(),
            ModelSpec::Custom(c) => c.clone(),
        }
    }
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Preset(Preset::Tiny)
    }
}

impl Serialize for ModelSpec {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ModelSpec::Preset(p) => s.serialize_str(p.as_str()),
            ModelSpec::Custom(c) => c.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for ModelSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct SpecVisitor;

        impl<'de> Visitor<'de> for SpecVisitor {
            type Value = ModelSpec;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a preset name or a model object")
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<ModelSpec, E> {
                Preset::parse(v).map(ModelSpec::Preset).map_err(E::custom)
            }

            fn visit_map<A: MapAccess<'de>>(self, map: A) -> Result<ModelSpec, A::Error> {
                ViTConfig::deserialize(de::value::MapAccessDeserializer::new(map)).map(ModelSpec::Custom)
            }
        }

        d.deserialize_any(SpecVisitor)
    }
}

/// Per-channel `(v - mean) / std`; a single value applies to every channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: vec![0.5],
            std: vec![0.25],
        }
    }
}

impl Normalization {
    pub fn per_channel(&self, channels: usize) -> CliResult<(Vec<f32>, Vec<f32>)> {
        let expand = |v: &[f32], what: &str| match v.len() {
            1 => Ok(vec![v[0]; channels]),
            n if n == channels => Ok(v.to_vec()),
            n => Err(CliError::Config(format!(
                "data.normalization.{what} has {n} values for {channels} channels"
            ))),
        };
        Ok((expand(&self.mean, "mean")?, expand(&self.std, "std")?))
    }
}

fn default_synthetic_train() -> usize {
    512
}

fn default_synthetic_eval() -> usize {
    256
}

fn default_label_bytes() -> usize {
    1
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    /// Procedural local-texture task; seeds derive from the run seed unless given.
    Synthetic {
        #[serde(default = "default_synthetic_train")]
        train: usize,
        #[serde(default = "default_synthetic_eval")]
        eval: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    /// MNIST-style IDX image and label files.
    IdxFiles {
        train_images: PathBuf,
        train_labels: PathBuf,
        #[serde(default)]
        eval_images: Option<PathBuf>,
        #[serde(default)]
        eval_labels: Option<PathBuf>,
        #[serde(default)]
        normalization: Normalization,
    },
    /// CIFAR binary batches; `label_bytes` is 1 for CIFAR-10 and 2 for CIFAR-100
    /// (coarse, fine; the last byte is used).
    CifarBinary {
        train: Vec<PathBuf>,
        #[serde(default)]
        eval: Vec<PathBuf>,
        #[serde(default = "default_label_bytes")]
        label_bytes: usize,
        #[serde(default)]
        normalization: Normalization,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic {
            train: default_synthetic_train(),
            eval: default_synthetic_eval(),
            seed: None,
        }
    }
}

/// Supervised pretraining of the full backbone on the synthetic source task
/// (axis-aligned motifs) before the recipe is attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples: 1024,
            epochs: 8,
            batch_size: 32,
            learning_rate: 5e-4,
            seed: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub recipe: AdapterRecipe,
    pub train: TrainConfig,
    pub data: DatasetSource,
    /// Seeds model initialization and synthetic data; `--seed` overrides it
    /// together with `train.seed`.
    pub seed: u64,
    pub pretrain: Option<PretrainConfig>,
    /// Checkpoint whose backbone and head tensors replace the initialization.
    pub init_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSpec::default(),
            recipe: AdapterRecipe::default(),
            train: TrainConfig::default(),
            data: DatasetSource::default(),
            seed: 0,
            pretrain: None,
            init_checkpoint: None,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    /// Parses a JSON document; errors carry the offending field path.
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("{path}: {}", e.inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        // Relative data and checkpoint paths are taken from the config's directory.
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DatasetSource::Synthetic { .. } => {}
            DatasetSource::IdxFiles {
                train_images,
                train_labels,
                eval_images,
                eval_labels,
                ..
            } => {
                fix(train_images);
                fix(train_labels);
                eval_images.iter_mut().for_each(fix);
                eval_labels.iter_mut().for_each(fix);
            }
            DatasetSource::CifarBinary { train, eval, .. } => {
                train.iter_mut().for_each(fix);
                eval.iter_mut().for_each(fix);
            }
        }
        if let Some(p) = &mut self.init_checkpoint {
            fix(p);
        }
    }

    pub fn model(&self) -> ViTConfig {
        self.model.resolve()
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> CliResult<()> {
        let model = self.model();
        model.validate()?;
        self.recipe.validate()?;
        self.train.validate()?;
        if self.recipe.lora_rank > model.embed_dim {
            return Err(CliError::Config(format!(
                "recipe.lora_rank {} exceeds model.embed_dim {}",
                self.recipe.lora_rank, model.embed_dim
            )));
        }
        match &self.data {
            DatasetSource::Synthetic { train, .. } => {
                if *train == 0 {
                    return Err(CliError::Config("data.train must be at least 1".into()));
                }
                if model.num_classes < 2 {
                    return Err(CliError::Config("model.num_classes must be at least 2 for synthetic data".into()));
                }
            }
            DatasetSource::CifarBinary { label_bytes, train, .. } => {
                if !(1..=2).contains(label_bytes) {
                    return Err(CliError::Config("data.label_bytes must be 1 or 2".into()));
                }
                if train.is_empty() {
                    return Err(CliError::Config("data.train lists no files".into()));
                }
            }
            DatasetSource::IdxFiles { .. } => {}
        }
        if let Some(p) = &self.pretrain {
            if !matches!(self.data, DatasetSource::Synthetic { .. }) {
                return Err(CliError::Config("pretrain is only available with synthetic data".into()));
            }
            if p.samples == 0 || p.batch_size == 0 || !(p.learning_rate > 0.0) {
                return Err(CliError::Config(
                    "pretrain.samples, pretrain.batch_size and pretrain.learning_rate must be positive".into(),
                ));
            }
        }
        Ok(())
    }

    /// The configuration with the model written out, as stored next to run artifacts.
    pub fn resolved(&self) -> RunConfig {
        RunConfig {
            model: ModelSpec::Custom(self.model()),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("run config serializes")
    }
}
