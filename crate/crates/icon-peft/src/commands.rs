//! Command implementations. Each takes a resolved [`RunConfig`] and writes
//! human-readable output to `w`; files go under the run's output directory.

use std::io::Write;
use std::path::{Path, PathBuf};

use icon_peft_core::adapters::{AdapterKind, AdapterRecipe, Placement};
use icon_peft_core::backbone::{attention_rollout, AttentionRecord, ViTConfig};
use icon_peft_core::gradcheck::{check_model, jitter_trainable, GradCheckOptions, GroupReport};
use icon_peft_core::model::{parameter_registry, Model};
use icon_peft_core::params::CountScope;
use icon_peft_core::train::{evaluate, train, Dataset, EpochMetrics, Evaluation, SynthSpec, TrainConfig};
use icon_peft_core::{Real, Tensor};

use crate::checkpoint::{self, LoadScope};
use crate::config::{PretrainConfig, RunConfig};
use crate::datasets;
use crate::error::{CliError, CliResult};
use crate::report::{self, ParamsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Largest per-group relative error a gradient check accepts.
    pub fn grad_threshold(self) -> f64 {
        match self {
            Precision::F32 => 1e-3,
            Precision::F64 => 1e-5,
        }
    }

    /// Relative-error denominator floor. A zero gradient leaves ~1e-10 of
    /// analytic residue at 32 bits; at 64 the stencil's own ~3e-13 dominates.
    pub fn grad_floor(self) -> f64 {
        match self {
            Precision::F32 => 1e-4,
            Precision::F64 => 1e-7,
        }
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PRETRAINED_FILE: &str = "pretrained.json";
pub const PARAMS_FILE: &str = "params.json";
pub const CONFIG_FILE: &str = "config.json";
pub const ROLLOUT_CSV: &str = "rollout.csv";
pub const ROLLOUT_PGM: &str = "rollout.pgm";

/// `1234567` as `1,234,567`.
pub fn thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn describe_model(m: &ViTConfig) -> String {
    format!(
        "D={} depth={} heads={} patch={} image={} classes={}",
        m.embed_dim, m.depth, m.num_heads, m.patch_size, m.image_size, m.num_classes
    )
}

fn describe_recipe(r: &AdapterRecipe) -> String {
    match r.kind {
        AdapterKind::Icon => {
            let place = match r.placement {
                Placement::Sequential => "sequential",
                Placement::Parallel => "parallel",
            };
            format!("icon (d={}, K={}, {place})", r.bottleneck_dim, r.kernel_size)
        }
        AdapterKind::BottleneckSequential | AdapterKind::AdaptformerParallel => {
            format!("{} (d={})", r.kind.as_str(), r.bottleneck_dim)
        }
        AdapterKind::Lora => format!("lora (r={})", r.lora_rank),
        k => k.as_str().to_string(),
    }
}

fn epoch_line(r: &EpochMetrics) -> String {
    format!(
        "epoch {:>3} {:<5} loss {:.4} accuracy {:.4}",
        r.epoch,
        r.split.as_str(),
        r.loss,
        r.accuracy
    )
}

/// Trains the full model on the synthetic source task.
pub fn pretrain_backbone<T: Real>(model: &ViTConfig, cfg: &PretrainConfig, w: &mut dyn Write) -> CliResult<Model<T>> {
    let data = datasets::pretrain_set(model, cfg)?;
    let mut net = Model::<T>::new(model, &AdapterRecipe::new(AdapterKind::Full), cfg.seed)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        learning_rate: Some(cfg.learning_rate),
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    train(&mut net, &data, None, &tc, |r| log.push(format!("pretrain {}", epoch_line(r))))?;
    for line in log {
        writeln!(w, "{line}")?;
    }
    Ok(net)
}

/// Builds the configured model: seeded init, then optional pretraining and
/// backbone initialization from a checkpoint.
pub fn build_model<T: Real>(cfg: &RunConfig, out: &Path, w: &mut dyn Write) -> CliResult<Model<T>> {
    let mcfg = cfg.model();
    let mut model = Model::<T>::new(&mcfg, &cfg.recipe, cfg.seed)?;
    if let Some(p) = &cfg.pretrain {
        let pre = pretrain_backbone::<T>(&mcfg, p, w)?;
        model.load_backbone_from(&pre)?;
        checkpoint::save(&pre, &out.join(PRETRAINED_FILE))?;
    }
    if let Some(path) = &cfg.init_checkpoint {
        checkpoint::load_into(&mut model, path, LoadScope::Backbone)?;
    }
    Ok(model)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub params: ParamsReport,
    pub out_dir: PathBuf,
}

impl TrainOutcome {
    /// Accuracy of the last evaluation row, if any.
    pub fn final_eval_accuracy(&self) -> Option<f64> {
        self.history
            .iter()
            .rev()
            .find(|r| r.split == icon_peft_core::train::Split::Eval)
            .map(|r| r.accuracy)
    }
}

/// Trains and writes `metrics.csv`, the checkpoint, `params.json` and the
/// resolved `config.json`.
pub fn train_cmd<T: Real>(cfg: &RunConfig, out: &Path, w: &mut dyn Write) -> CliResult<TrainOutcome> {
    let mcfg = cfg.model();
    for warning in cfg.recipe.warnings() {
        writeln!(w, "warning: {warning}")?;
    }
    let (train_ds, eval_ds) = datasets::load(&cfg.data, &mcfg, cfg.seed)?;
    let mut model = build_model::<T>(cfg, out, w)?;
    let params = ParamsReport::from_registry(cfg.recipe.kind.as_str(), model.registry());
    writeln!(
        w,
        "training {} on {} samples: {} of {} parameters trainable ({:.2}%)",
        describe_recipe(&cfg.recipe),
        train_ds.len(),
        thousands(params.trainable),
        thousands(params.total),
        params.ratio
    )?;
    let mut lines = Vec::new();
    let history = train(&mut model, &train_ds, eval_ds.as_ref(), &cfg.train, |r| lines.push(epoch_line(r)))?;
    for line in lines {
        writeln!(w, "{line}")?;
    }
    report::write(&out.join(METRICS_FILE), report::metrics_csv(&history))?;
    checkpoint::save(&model, &out.join(CHECKPOINT_FILE))?;
    report::write(&out.join(PARAMS_FILE), params.to_json())?;
    let mut resolved = cfg.resolved().to_json();
    resolved.push('\n');
    report::write(&out.join(CONFIG_FILE), resolved)?;
    writeln!(w, "wrote {}", out.display())?;
    Ok(TrainOutcome {
        history,
        params,
        out_dir: out.to_path_buf(),
    })
}

fn eval_split(cfg: &RunConfig) -> CliResult<Dataset> {
    let (tr, ev) = datasets::load(&cfg.data, &cfg.model(), cfg.seed)?;
    Ok(ev.unwrap_or(tr))
}

fn load_trained<T: Real>(cfg: &RunConfig, ckpt: &Path) -> CliResult<Model<T>> {
    let mut model = Model::<T>::new(&cfg.model(), &cfg.recipe, cfg.seed)?;
    checkpoint::load_into(&mut model, ckpt, LoadScope::All)?;
    Ok(model)
}

/// Top-1 accuracy and mean loss of a checkpoint on the evaluation split
/// (the training split when none is configured).
pub fn evaluate_cmd<T: Real>(cfg: &RunConfig, ckpt: &Path, w: &mut dyn Write) -> CliResult<Evaluation> {
    let model = load_trained::<T>(cfg, ckpt)?;
    let data = eval_split(cfg)?;
    let e = evaluate(&model, &data, cfg.train.batch_size)?;
    writeln!(w, "samples {}\naccuracy {:.4}\nloss {:.6}", data.len(), e.accuracy, e.loss)?;
    Ok(e)
}

#[derive(Debug, Clone)]
pub struct CountReport {
    pub configured: ParamsReport,
    /// One row per built-in recipe, sharing the configured dimensions.
    pub recipes: Vec<ParamsReport>,
    /// `(K, trainable)` for icon at the configured bottleneck width.
    pub kernel_sweep: Vec<(usize, usize)>,
}

pub const KERNEL_SWEEP: [usize; 4] = [1, 3, 5, 7];

/// Parameter accounting from the registry alone; no weights are allocated.
pub fn count_params_cmd(cfg: &RunConfig, out: Option<&Path>, w: &mut dyn Write) -> CliResult<CountReport> {
    let mcfg = cfg.model();
    let report_for = |recipe: &AdapterRecipe| -> CliResult<ParamsReport> {
        Ok(ParamsReport::from_registry(recipe.kind.as_str(), &parameter_registry(&mcfg, recipe)?))
    };
    let configured = report_for(&cfg.recipe)?;
    writeln!(w, "model      {}", describe_model(&mcfg))?;
    writeln!(w, "recipe     {}", describe_recipe(&cfg.recipe))?;
    writeln!(w, "total      {}", thousands(configured.total))?;
    writeln!(w, "trainable  {}", thousands(configured.trainable))?;
    writeln!(w, "ratio      {:.2}%", configured.ratio)?;
    for (owner, c) in &configured.by_owner {
        writeln!(w, "  {owner:<9}{:>12} total {:>12} trainable", thousands(c.total), thousands(c.trainable))?;
    }

    writeln!(w, "\n{:<24}{:>14}{:>10}{:>9}", "recipe", "trainable", "M", "ratio")?;
    let mut recipes = Vec::new();
    for kind in AdapterKind::ALL {
        let r = report_for(&AdapterRecipe { kind, ..cfg.recipe.clone() })?;
        writeln!(
            w,
            "{:<24}{:>14}{:>10.2}{:>8.2}%",
            kind.as_str(),
            thousands(r.trainable),
            r.trainable as f64 / 1e6,
            r.ratio
        )?;
        recipes.push(r);
    }

    writeln!(w, "\nkernel sweep (icon, d={})", cfg.recipe.bottleneck_dim)?;
    let mut kernel_sweep = Vec::new();
    for k in KERNEL_SWEEP {
        let recipe = AdapterRecipe {
            kind: AdapterKind::Icon,
            kernel_size: k,
            ..cfg.recipe.clone()
        };
        let n = parameter_registry(&mcfg, &recipe)?.count(CountScope::Trainable);
        writeln!(w, "K={k:<3}{:>14}{:>10.2}", thousands(n), n as f64 / 1e6)?;
        kernel_sweep.push((k, n));
    }
    if let Some(dir) = out {
        report::write(&dir.join(PARAMS_FILE), configured.to_json())?;
    }
    Ok(CountReport {
        configured,
        recipes,
        kernel_sweep,
    })
}

pub const GRAD_CHECK_MAX_DIM: usize = 32;
pub const GRAD_CHECK_MAX_DEPTH: usize = 2;
const GRAD_CHECK_BATCH: usize = 2;
/// Lifts zero-initialized up-projections off zero so upstream gradients are exercised.
const GRAD_CHECK_JITTER: f64 = 0.05;

#[derive(Debug, Clone)]
pub struct GradCheckOutcome {
    pub reports: Vec<GroupReport>,
    pub threshold: f64,
}

impl GradCheckOutcome {
    pub fn max_rel_err(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.reports.iter().all(|r| r.max_rel_err <= self.threshold)
    }
}

/// Central-difference check of every trainable group. Analytic gradients are
/// taken at `precision`; the numeric reference always runs at 64 bits.
pub fn grad_check(cfg: &RunConfig, precision: Precision, corrupt_backward: bool) -> CliResult<GradCheckOutcome> {
    let mcfg = cfg.model();
    if mcfg.embed_dim > GRAD_CHECK_MAX_DIM || mcfg.depth > GRAD_CHECK_MAX_DEPTH {
        return Err(CliError::Config(format!(
            "grad-check needs embed_dim <= {GRAD_CHECK_MAX_DIM} and depth <= {GRAD_CHECK_MAX_DEPTH}, got {} and {}",
            mcfg.embed_dim, mcfg.depth
        )));
    }
    let spec = SynthSpec {
        size: mcfg.image_size,
        channels: mcfg.in_channels,
        ..SynthSpec::target(mcfg.num_classes.max(2))
    };
    let mut data = spec.generate(cfg.seed, GRAD_CHECK_BATCH)?;
    let norm = datasets::normalization_of(&cfg.data);
    let (mean, std) = norm.per_channel(data.channels)?;
    data.normalize(&mean, &std)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (images, mut labels) = data.batch::<f64>(&idx)?;
    labels.iter_mut().for_each(|l| *l %= mcfg.num_classes);
    let opts = GradCheckOptions {
        floor: precision.grad_floor(),
        seed: cfg.seed,
        corrupt_backward,
        ..GradCheckOptions::default()
    };
    let reports = match precision {
        Precision::F32 => check_at::<f32>(cfg, &images, &labels, &opts)?,
        Precision::F64 => check_at::<f64>(cfg, &images, &labels, &opts)?,
    };
    Ok(GradCheckOutcome {
        reports,
        threshold: precision.grad_threshold(),
    })
}

fn check_at<T: Real>(
    cfg: &RunConfig,
    images: &Tensor<f64>,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> CliResult<Vec<GroupReport>> {
    let mut model = Model::<T>::new(&cfg.model(), &cfg.recipe, cfg.seed)?;
    jitter_trainable(&mut model.store, GRAD_CHECK_JITTER, cfg.seed);
    Ok(check_model(&model, images, labels, opts)?)
}

/// Prints the per-group table; a group over threshold is a numeric failure.
pub fn grad_check_cmd(
    cfg: &RunConfig,
    precision: Precision,
    corrupt_backward: bool,
    w: &mut dyn Write,
) -> CliResult<GradCheckOutcome> {
    let outcome = grad_check(cfg, precision, corrupt_backward)?;
    writeln!(w, "recipe {} at {:?}, threshold {:e}", describe_recipe(&cfg.recipe), precision, outcome.threshold)?;
    writeln!(w, "{:<40}{:>8}{:>8}{:>14}", "group", "numel", "probed", "max rel err")?;
    for r in &outcome.reports {
        let verdict = if r.max_rel_err <= outcome.threshold { "ok" } else { "FAIL" };
        writeln!(w, "{:<40}{:>8}{:>8}{:>14.3e}  {verdict}", r.name, r.numel, r.checked, r.max_rel_err)?;
    }
    if !outcome.passed() {
        let worst = outcome
            .reports
            .iter()
            .filter(|r| r.max_rel_err > outcome.threshold)
            .map(|r| r.name.as_str())
            .collect::<Vec<_>>()
            .join(", ");
        return Err(CliError::Numeric(format!(
            "max relative error {:.3e} exceeds {:e} in: {worst}",
            outcome.max_rel_err(),
            outcome.threshold
        )));
    }
    writeln!(w, "all {} groups pass (max {:.3e})", outcome.reports.len(), outcome.max_rel_err())?;
    Ok(outcome)
}

/// Image source for a rollout map.
#[derive(Debug, Clone, PartialEq)]
pub enum RolloutInput {
    /// Sample index into the evaluation split (training split when none).
    Index(usize),
    /// Binary PGM or PPM file.
    Image(PathBuf),
}

#[derive(Debug, Clone)]
pub struct RolloutOutcome {
    /// Full `M x M` rollout matrix, row-major.
    pub matrix: Vec<f64>,
    /// Attention received per token, min-max normalized, row-major over the grid.
    pub map: Vec<f64>,
    /// `(rows, cols)` of the patch grid.
    pub grid: (usize, usize),
}

fn rollout_image<T: Real>(cfg: &RunConfig, input: &RolloutInput) -> CliResult<Tensor<T>> {
    let mcfg = cfg.model();
    let (data, i) = match input {
        RolloutInput::Index(i) => {
            let data = eval_split(cfg)?;
            if *i >= data.len() {
                return Err(CliError::Config(format!("--index {i} is out of range for {} samples", data.len())));
            }
            (data, *i)
        }
        RolloutInput::Image(path) => {
            let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
            let img = report::decode_netpbm(&bytes)?;
            if img.width != img.height {
                return Err(CliError::Config(format!(
                    "{}: image is {}x{}, expected square",
                    path.display(),
                    img.width,
                    img.height
                )));
            }
            let norm = datasets::normalization_of(&cfg.data);
            (datasets::single_image(img.pixels, img.channels, img.width, &mcfg, &norm)?, 0)
        }
    };
    Ok(data.batch::<T>(&[i])?.0)
}

/// Attention-rollout map of one image: the column mean of the rollout matrix,
/// i.e. how much attention each patch receives, written as CSV and PGM.
pub fn rollout_cmd<T: Real>(
    cfg: &RunConfig,
    ckpt: &Path,
    input: &RolloutInput,
    out: &Path,
    w: &mut dyn Write,
) -> CliResult<RolloutOutcome> {
    let model = load_trained::<T>(cfg, ckpt)?;
    let x = rollout_image::<T>(cfg, input)?;
    let mut tape = icon_peft_core::Tape::new();
    let fwd = model.forward(&mut tape, &x, true)?;
    let mut records = Vec::with_capacity(fwd.attention.len());
    for map in &fwd.attention {
        records.extend(AttentionRecord::from_batch(map)?);
    }
    let r = attention_rollout(&records)?;
    let m = r.shape()[0];
    let matrix = r.into_data();
    let received: Vec<f64> = (0..m).map(|j| (0..m).map(|i| matrix[i * m + j]).sum::<f64>() / m as f64).collect();
    let map = report::min_max(&received);
    let (rows, cols) = model.cfg().grid();
    report::write(&out.join(ROLLOUT_CSV), report::grid_csv(&map, cols))?;
    report::write(&out.join(ROLLOUT_PGM), report::encode_pgm(&map, cols, rows))?;
    writeln!(w, "rollout over {} layers, {rows}x{cols} grid, wrote {}", records.len(), out.display())?;
    Ok(RolloutOutcome {
        matrix,
        map,
        grid: (rows, cols),
    })
}

pub fn show_config_cmd(cfg: &RunConfig, w: &mut dyn Write) -> CliResult<()> {
    writeln!(w, "{}", cfg.resolved().to_json())?;
    Ok(())
}
