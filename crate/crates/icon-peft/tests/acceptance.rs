//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.
//!
//! `cargo test --test acceptance` runs every criterion; trailing numeric
//! arguments select a subset (`cargo test --test acceptance -- 1 2 5`).

use std::io::sink;
use std::path::{Path, PathBuf};
use std::time::Instant;

use icon_peft::commands::{self, Precision, RolloutInput, TrainOutcome};
use icon_peft::config::{ModelSpec, Preset, PretrainConfig, RunConfig};
use icon_peft::{checkpoint, config::DatasetSource};
use icon_peft_core::adapters::{AdapterKind, AdapterRecipe, Placement};
use icon_peft_core::backbone::{attention_sub_block, mlp_sub_block, ViTConfig};
use icon_peft_core::gradcheck::finite_diff_check;
use icon_peft_core::model::Model;
use icon_peft_core::params::{Ctx, ParamStore};
use icon_peft_core::train::{synth_dataset, train, Dataset, TrainConfig};
use icon_peft_core::{Real, Tape, Tensor};
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

// Published figures (millions of trainable parameters, ViT-B/16, 100 classes).
const PAPER_ICON_M: f64 = 1.71;
const PAPER_ADAPTER_M: f64 = 2.46;
const PAPER_ADAPTFORMER_M: f64 = 1.26;
const PAPER_LINEAR_M: f64 = 0.07;
const ICON_RATIO_BAND: (f64, f64) = (1.9, 2.0);

const TOL_ICON: f64 = 0.01;
const TOL_ADAPTER: f64 = 0.01;
const TOL_ADAPTFORMER: f64 = 0.02;
const TOL_LINEAR_M: f64 = 0.01;
const GRAD_TOL_F64: f64 = 1e-5;
const CONV_TOL: f64 = 1e-5;
const CONV_SEEDS: u64 = 20;
const GAMMA_CASES: u32 = 64;
const ZERO_IMPACT_BATCHES: usize = 16;
const ROW_SUM_TOL: f64 = 1e-4;

// Learning-signal protocol.
const SIGNAL_SEEDS: u64 = 3;
const SIGNAL_TRAIN: usize = 512;
const SIGNAL_EVAL: usize = 256;
const SIGNAL_EPOCHS: usize = 8;
const SIGNAL_MARGIN: f64 = 0.05;

/// Criteria that fail on this substrate for reasons analysed in the decision
/// notes. They still print FAIL, but only a regression elsewhere, or an
/// unexpected pass here, changes the exit status.
const KNOWN_UNATTAINABLE: &[usize] = &[];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

#[derive(Default)]
struct Suite {
    scratch: PathBuf,
    /// `(config, checkpoint)` of every tiny model trained so far.
    trained: Vec<(RunConfig, PathBuf)>,
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let dir = tempfile::tempdir().expect("scratch dir");
    let mut suite = Suite {
        scratch: dir.path().to_path_buf(),
        ..Suite::default()
    };
    type Check = fn(&mut Suite) -> Verdict;
    let criteria: [(usize, &str, Check); 11] = [
        (1, "parameter counts", c1_parameter_counts),
        (2, "kernel-size ablation", c2_kernel_sweep),
        (3, "gradient correctness", c3_gradients),
        (4, "dynamic conv oracle", c4_conv_oracle),
        (5, "zero-impact init", c5_zero_impact),
        (6, "gamma gate", c6_gamma_gate),
        (7, "freeze integrity", c7_freeze_integrity),
        (8, "learning signal", c8_learning_signal),
        (9, "placement ablation", c9_placement),
        (10, "determinism and persistence", c10_determinism),
        (11, "rollout contract", c11_rollout),
    ];
    let (mut ran, mut passed, mut regressions) = (0, 0, Vec::new());
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let v = check(&mut suite);
        ran += 1;
        let known = KNOWN_UNATTAINABLE.contains(&n);
        if v.pass {
            passed += 1;
        }
        let status = match (v.pass, known) {
            (true, false) => "PASS",
            (true, true) => "PASS (listed as unattainable; update the list)",
            (false, true) => "FAIL (known, not attainable here)",
            (false, false) => "FAIL",
        };
        if v.pass == known {
            regressions.push(n);
        }
        println!(
            "criterion {n:>2} {status} {name} ({:.1}s): {}",
            t.elapsed().as_secs_f64(),
            v.detail
        );
    }
    println!("acceptance: {passed}/{ran} criteria passed");
    if !regressions.is_empty() {
        println!("acceptance: unexpected outcome for criteria {regressions:?}");
        std::process::exit(1);
    }
}

fn rel_dev(actual: f64, reference: f64) -> f64 {
    (actual - reference).abs() / reference
}

fn vitb_counts() -> commands::CountReport {
    let cfg = Preset::VitbLike.run_config();
    commands::count_params_cmd(&cfg, None, &mut sink()).expect("counting never fails on a preset")
}

fn c1_parameter_counts(_: &mut Suite) -> Verdict {
    let report = vitb_counts();
    let count = |k: AdapterKind| report.recipes.iter().find(|r| r.recipe == k.as_str()).unwrap().trainable;
    let icon = count(AdapterKind::Icon);
    let adapter = count(AdapterKind::BottleneckSequential);
    let af = count(AdapterKind::AdaptformerParallel);
    let linear = count(AdapterKind::LinearProbe);
    let ratio = report.configured.ratio;
    let m = |n: usize| n as f64 / 1e6;
    let checks = [
        icon == 1_715_824 && rel_dev(m(icon), PAPER_ICON_M) <= TOL_ICON,
        rel_dev(m(adapter), PAPER_ADAPTER_M) <= TOL_ADAPTER,
        rel_dev(m(af), PAPER_ADAPTFORMER_M) <= TOL_ADAPTFORMER,
        linear == 76_900 && (m(linear) - PAPER_LINEAR_M).abs() <= TOL_LINEAR_M,
        report.configured.trainable == icon && (ICON_RATIO_BAND.0..=ICON_RATIO_BAND.1).contains(&ratio),
    ];
    verdict(
        checks.iter().all(|&c| c),
        format!(
            "icon {icon} ({:+.2}% vs {PAPER_ICON_M}), bottleneck {adapter} ({:+.2}% vs {PAPER_ADAPTER_M}), \
             adaptformer {af} ({:+.2}% vs {PAPER_ADAPTFORMER_M}), linear {linear} (vs {PAPER_LINEAR_M}), icon ratio {ratio:.3}%",
            100.0 * (m(icon) / PAPER_ICON_M - 1.0),
            100.0 * (m(adapter) / PAPER_ADAPTER_M - 1.0),
            100.0 * (m(af) / PAPER_ADAPTFORMER_M - 1.0),
        ),
    )
}

fn c2_kernel_sweep(_: &mut Suite) -> Verdict {
    let report = vitb_counts();
    let cfg = Preset::VitbLike.run_config();
    let (depth, d) = (cfg.model().depth, cfg.recipe.bottleneck_dim);
    let sweep: Vec<(usize, usize)> = report.kernel_sweep.iter().copied().filter(|(k, _)| *k >= 3).collect();
    let mut ok = sweep.len() == 3;
    for w in sweep.windows(2) {
        let ((k1, n1), (k2, n2)) = (w[0], w[1]);
        let expected = depth * d * (k2 * k2 - k1 * k1) * (d + 1);
        ok &= n2 > n1 && n2 - n1 == expected;
    }
    let shown: Vec<String> = sweep.iter().map(|(k, n)| format!("K={k}: {n}")).collect();
    verdict(ok, format!("{}; per-step delta = depth*d*(K2^2-K1^2)*(d+1)", shown.join(", ")))
}

fn grad_tiny(recipe: AdapterRecipe) -> RunConfig {
    let mut cfg = Preset::GradTiny.run_config();
    cfg.recipe = AdapterRecipe {
        bottleneck_dim: cfg.recipe.bottleneck_dim,
        lora_rank: cfg.recipe.lora_rank,
        ..recipe
    };
    cfg
}

fn c3_gradients(_: &mut Suite) -> Verdict {
    let recipes = [
        ("icon-seq", AdapterRecipe::new(AdapterKind::Icon)),
        ("icon-par", AdapterRecipe::new(AdapterKind::Icon).with_placement(Placement::Parallel)),
        ("bottleneck", AdapterRecipe::new(AdapterKind::BottleneckSequential)),
        ("adaptformer", AdapterRecipe::new(AdapterKind::AdaptformerParallel)),
        ("lora", AdapterRecipe::new(AdapterKind::Lora)),
        ("bitfit", AdapterRecipe::new(AdapterKind::Bitfit)),
        ("full", AdapterRecipe::new(AdapterKind::Full)),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, recipe) in recipes {
        match commands::grad_check(&grad_tiny(recipe), Precision::F64, false) {
            Ok(o) => {
                ok &= o.threshold == GRAD_TOL_F64 && o.passed();
                parts.push(format!("{name} {:.1e}/{}g", o.max_rel_err(), o.reports.len()));
            }
            Err(e) => {
                ok = false;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    verdict(ok, format!("max rel err at f64 (<= {GRAD_TOL_F64:e}): {}", parts.join(", ")))
}

/// Direct nested-loop depthwise convolution, zero "same" padding, no flip.
fn conv_oracle(x: &[f64], k: &[f64], b: usize, c: usize, h: usize, w: usize, ks: usize) -> Vec<f64> {
    let r = (ks / 2) as isize;
    let mut out = vec![0.0; b * c * h * w];
    for p in 0..b * c {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let mut acc = 0.0;
                for u in -r..=r {
                    for v in -r..=r {
                        let (y, z) = (i + u, j + v);
                        if y >= 0 && y < h as isize && z >= 0 && z < w as isize {
                            let kv = k[p * ks * ks + ((u + r) as usize) * ks + (v + r) as usize];
                            acc += kv * x[p * h * w + y as usize * w + z as usize];
                        }
                    }
                }
                out[p * h * w + i as usize * w + j as usize] = acc;
            }
        }
    }
    out
}

fn c4_conv_oracle(_: &mut Suite) -> Verdict {
    let (mut cases, mut worst_fwd, mut worst_grad) = (0usize, 0.0f64, 0.0f64);
    for seed in 0..CONV_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(0xc0de ^ seed);
        for b in 1..=4 {
            for c in 1..=4 {
                for h in 1..=8 {
                    for w in 1..=8 {
                        for ks in [1, 3, 5, 7] {
                            let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
                            let x = draw(b * c * h * w);
                            let k = draw(b * c * ks * ks);
                            let weights = draw(b * c * h * w);
                            let mut tape = Tape::<f64>::new();
                            let xv = tape.input(vec![b, c, h, w], x.clone(), true).unwrap();
                            let kv = tape.input(vec![b, c, ks, ks], k.clone(), true).unwrap();
                            let out = tape.conv2d_depthwise_dynamic(xv, kv).unwrap();
                            let oracle = conv_oracle(&x, &k, b, c, h, w, ks);
                            for (a, o) in tape.value(out).iter().zip(&oracle) {
                                worst_fwd = worst_fwd.max((a - o).abs());
                            }
                            // L = sum(out * weights)
                            let wv = tape.input(vec![b, c, h, w], weights.clone(), false).unwrap();
                            let prod = tape.mul(out, wv).unwrap();
                            let loss = tape.sum(prod).unwrap();
                            tape.backward(loss).unwrap();
                            let gx = tape.grad(xv).unwrap().to_vec();
                            let gk = tape.grad(kv).unwrap().to_vec();
                            let loss_of = |x: &[f64], k: &[f64]| -> f64 {
                                conv_oracle(x, k, b, c, h, w, ks).iter().zip(&weights).map(|(o, w)| o * w).sum()
                            };
                            let cx: Vec<usize> = (0..3).map(|_| rng.random_range(0..x.len())).collect();
                            let ck: Vec<usize> = (0..3).map(|_| rng.random_range(0..k.len())).collect();
                            let ex = finite_diff_check(|p: &[f64]| Ok(loss_of(p, &k)), &x, &gx, 1e-3, &cx).unwrap();
                            let ek = finite_diff_check(|p: &[f64]| Ok(loss_of(&x, p)), &k, &gk, 1e-3, &ck).unwrap();
                            worst_grad = worst_grad.max(ex).max(ek);
                            cases += 1;
                        }
                    }
                }
            }
        }
    }
    verdict(
        worst_fwd <= CONV_TOL && worst_grad <= CONV_TOL,
        format!("{cases} cases (B,C<=4, H,W<=8, K in 1/3/5/7, {CONV_SEEDS} seeds): max |fwd - oracle| {worst_fwd:.1e}, max grad rel err {worst_grad:.1e}"),
    )
}

fn bits<T: Real>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_f64().to_bits()).collect()
}

fn probe_batch<T: Real>(cfg: &ViTConfig, seed: u64, n: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * cfg.image_numel()).map(|_| T::from_f64(rng.random_range(-2.0..2.0))).collect();
    Tensor::new([n, cfg.in_channels, cfg.image_size, cfg.image_size], data).unwrap()
}

fn c5_zero_impact(_: &mut Suite) -> Verdict {
    let cfg = ViTConfig::tiny();
    let backbone = Model::<f32>::new(&cfg, &AdapterRecipe::new(AdapterKind::Frozen), 11).unwrap();
    let icon = |k: usize, p: Placement| AdapterRecipe::new(AdapterKind::Icon).with_kernel(k).with_placement(p).with_eq6_literal(false);
    let mut recipes = Vec::new();
    for k in [1, 3, 5, 7] {
        recipes.push((format!("icon-seq-K{k}"), icon(k, Placement::Sequential)));
        recipes.push((format!("icon-par-K{k}"), icon(k, Placement::Parallel)));
    }
    for kind in AdapterKind::ALL.into_iter().filter(|k| *k != AdapterKind::Icon) {
        recipes.push((kind.as_str().to_string(), AdapterRecipe::new(kind)));
    }
    let reference: Vec<Vec<u64>> = (0..ZERO_IMPACT_BATCHES)
        .map(|i| bits(&backbone.predict(&probe_batch::<f32>(&cfg, 500 + i as u64, 2)).unwrap()))
        .collect();
    let mut broken = Vec::new();
    for (name, recipe) in &recipes {
        let mut m = Model::<f32>::new(&cfg, recipe, 23).unwrap();
        m.load_backbone_from(&backbone).unwrap();
        let same = (0..ZERO_IMPACT_BATCHES)
            .all(|i| bits(&m.predict(&probe_batch::<f32>(&cfg, 500 + i as u64, 2)).unwrap()) == reference[i]);
        if !same {
            broken.push(name.clone());
        }
    }
    verdict(
        broken.is_empty(),
        format!(
            "{} recipe/placement variants x {ZERO_IMPACT_BATCHES} probe batches bit-identical to the backbone{}; \
             literal sequential icon excluded by construction (drops the MLP branch)",
            recipes.len(),
            if broken.is_empty() { String::new() } else { format!(", differing: {}", broken.join(", ")) }
        ),
    )
}

fn randomize<T: Real>(store: &mut ParamStore<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.registry().ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = T::from_f64(rng.random_range(-1.0..1.0));
        }
    }
}

fn c6_gamma_gate(_: &mut Suite) -> Verdict {
    let cfg = ViTConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 3,
        ..ViTConfig::tiny()
    };
    let mut runner = TestRunner::new(PropConfig {
        cases: GAMMA_CASES,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let strategy = (0u64..1_000_000, proptest::sample::select(vec![1usize, 3, 5, 7]), 1usize..=3);
    let result = runner.run(&strategy, |(seed, k, batch)| {
        let recipe = AdapterRecipe::new(AdapterKind::Icon).with_dim(4).with_kernel(k);
        let mut m = Model::<f64>::new(&cfg, &recipe, seed).unwrap();
        randomize(&mut m.store, seed ^ 0xa5a5);
        for i in 0..cfg.depth {
            m.store.by_name_mut(&format!("blocks.{i}.adapter.gamma")).unwrap().data_mut()[0] = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let m_tokens = cfg.num_tokens();
        let x: Vec<f64> = (0..batch * m_tokens * cfg.embed_dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        for block in &m.arch.blocks {
            let mut tape = Tape::new();
            let mut ctx = Ctx::new(&mut tape, &m.store);
            let xv = ctx.tape.input(vec![batch, m_tokens, cfg.embed_dim], x.clone(), false).unwrap();
            let (xp, _) = attention_sub_block(&mut ctx, block, xv, false).unwrap();
            let out = mlp_sub_block(&mut ctx, block, xp).unwrap();
            let same = ctx.tape.value(out).iter().zip(ctx.tape.value(xp)).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(TestCaseError::fail(format!("seed {seed}, K={k}: block output differs from its input")));
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => verdict(true, format!("{GAMMA_CASES} random weight/input cases, literal sequential mode: output == x' bit-exactly")),
        Err(e) => verdict(false, format!("{e}")),
    }
}

fn frozen_hash<T: Real>(m: &Model<T>) -> String {
    let mut h = Sha256::new();
    for (e, t) in m.registry().entries().iter().zip(m.store.tensors()) {
        if !e.trainable {
            h.update(e.name.as_bytes());
            for v in t.data() {
                h.update(v.to_f64().to_le_bytes());
            }
        }
    }
    hex::encode(h.finalize())
}

const PEFT_KINDS: [AdapterKind; 7] = [
    AdapterKind::Icon,
    AdapterKind::BottleneckSequential,
    AdapterKind::AdaptformerParallel,
    AdapterKind::Lora,
    AdapterKind::Bitfit,
    AdapterKind::LnOnly,
    AdapterKind::LinearProbe,
];

fn c7_freeze_integrity(_: &mut Suite) -> Verdict {
    let cfg = ViTConfig::tiny();
    let data = synth_dataset(71, 64, cfg.num_classes).unwrap();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut changed = Vec::new();
    for kind in PEFT_KINDS {
        let mut m = Model::<f32>::new(&cfg, &AdapterRecipe::new(kind), 3).unwrap();
        let before = frozen_hash(&m);
        let trainable_before: Vec<u64> = m.store.flatten(&m.registry().trainable_ids().collect::<Vec<_>>()).iter().map(|v| v.to_bits() as u64).collect();
        train(&mut m, &data, None, &tc, |_| {}).unwrap();
        let trainable_after: Vec<u64> = m.store.flatten(&m.registry().trainable_ids().collect::<Vec<_>>()).iter().map(|v| v.to_bits() as u64).collect();
        if frozen_hash(&m) != before || trainable_after == trainable_before {
            changed.push(kind.as_str());
        }
    }
    verdict(
        changed.is_empty(),
        if changed.is_empty() {
            format!("{} PEFT recipes, 3 epochs each: frozen SHA-256 unchanged, trainable set moved", PEFT_KINDS.len())
        } else {
            format!("violations in: {}", changed.join(", "))
        },
    )
}

fn signal_config(kind: AdapterKind, seed: u64, pretrained: &Path) -> RunConfig {
    RunConfig {
        model: ModelSpec::Preset(Preset::Tiny),
        recipe: AdapterRecipe::new(kind),
        train: TrainConfig {
            epochs: SIGNAL_EPOCHS,
            batch_size: 32,
            seed,
            ..TrainConfig::default()
        },
        data: DatasetSource::Synthetic {
            train: SIGNAL_TRAIN,
            eval: SIGNAL_EVAL,
            seed: Some(1000 + seed),
        },
        seed,
        init_checkpoint: Some(pretrained.to_path_buf()),
        ..RunConfig::default()
    }
}

fn train_recorded(suite: &mut Suite, cfg: RunConfig, tag: &str) -> TrainOutcome {
    let out = suite.scratch.join(tag);
    let outcome = commands::train_cmd::<f32>(&cfg, &out, &mut sink()).expect("training run");
    suite.trained.push((cfg, out.join(commands::CHECKPOINT_FILE)));
    outcome
}

fn c8_learning_signal(suite: &mut Suite) -> Verdict {
    let tiny = ViTConfig::tiny();
    let pre_cfg = PretrainConfig::default();
    let mut log = Vec::new();
    let pre = commands::pretrain_backbone::<f32>(&tiny, &pre_cfg, &mut log).expect("pretraining");
    let log = String::from_utf8(log).unwrap();
    let source_acc = log.lines().last().and_then(|l| l.rsplit(' ').next()).unwrap_or("?").to_string();
    let pretrained = suite.scratch.join("source").join(commands::PRETRAINED_FILE);
    checkpoint::save(&pre, &pretrained).unwrap();

    let kinds = [AdapterKind::Icon, AdapterKind::AdaptformerParallel, AdapterKind::LinearProbe];
    let mut ordered = 0;
    let mut margins = Vec::new();
    let mut rows = Vec::new();
    for seed in 0..SIGNAL_SEEDS {
        let acc: Vec<f64> = kinds
            .iter()
            .map(|&k| {
                let o = train_recorded(suite, signal_config(k, seed, &pretrained), &format!("signal-{}-{seed}", k.as_str()));
                o.final_eval_accuracy().unwrap()
            })
            .collect();
        if acc[0] >= acc[1] && acc[1] >= acc[2] {
            ordered += 1;
        }
        margins.push(acc[0] - acc[2]);
        rows.push(format!("s{seed} {:.3}/{:.3}/{:.3}", acc[0], acc[1], acc[2]));
    }
    let mean_margin = margins.iter().sum::<f64>() / margins.len() as f64;
    verdict(
        2 * ordered > SIGNAL_SEEDS as usize && mean_margin >= SIGNAL_MARGIN,
        format!(
            "source train acc {source_acc}; held-out icon/adaptformer/linear: {}; ordering holds in {ordered}/{SIGNAL_SEEDS} seeds; mean icon - linear = {:+.1} pts (need >= {:.0})",
            rows.join(", "),
            100.0 * mean_margin,
            100.0 * SIGNAL_MARGIN
        ),
    )
}

fn small_tiny_config(recipe: AdapterRecipe, seed: u64) -> RunConfig {
    RunConfig {
        model: ModelSpec::Preset(Preset::Tiny),
        recipe,
        train: TrainConfig {
            epochs: 1,
            batch_size: 16,
            seed,
            ..TrainConfig::default()
        },
        data: DatasetSource::Synthetic {
            train: 48,
            eval: 16,
            seed: Some(seed),
        },
        seed,
        ..RunConfig::default()
    }
}

fn c9_placement(suite: &mut Suite) -> Verdict {
    let seq = AdapterRecipe::new(AdapterKind::Icon);
    let par = AdapterRecipe::new(AdapterKind::Icon).with_placement(Placement::Parallel);
    let a = train_recorded(suite, small_tiny_config(seq.clone(), 4), "placement-seq");
    let b = train_recorded(suite, small_tiny_config(par.clone(), 4), "placement-par");
    let load = |recipe: &AdapterRecipe, dir: &Path| {
        let mut m = Model::<f32>::new(&ViTConfig::tiny(), recipe, 0).unwrap();
        checkpoint::load_into(&mut m, &dir.join(commands::CHECKPOINT_FILE), checkpoint::LoadScope::All).unwrap();
        m
    };
    let (ma, mb) = (load(&seq, &a.out_dir), load(&par, &b.out_dir));
    let probe = probe_batch::<f32>(&ViTConfig::tiny(), 99, 4);
    let (pa, pb) = (ma.predict(&probe).unwrap(), mb.predict(&probe).unwrap());
    let diff = pa.data().iter().zip(pb.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    verdict(
        a.params.trainable == b.params.trainable && diff > 0.0,
        format!(
            "trainable sequential {} == parallel {}; max probe logit difference {diff:.3e}",
            a.params.trainable, b.params.trainable
        ),
    )
}

fn c10_determinism(suite: &mut Suite) -> Verdict {
    let cfg = small_tiny_config(AdapterRecipe::new(AdapterKind::Icon), 8);
    let a = train_recorded(suite, cfg.clone(), "repeat-a");
    let b = train_recorded(suite, cfg.clone(), "repeat-b");
    let ma = std::fs::read(a.out_dir.join(commands::METRICS_FILE)).unwrap();
    let mb = std::fs::read(b.out_dir.join(commands::METRICS_FILE)).unwrap();

    // In-memory model against a fresh model restored from its checkpoint.
    let tiny = ViTConfig::tiny();
    let mut trained = Model::<f32>::new(&tiny, &cfg.recipe, 1).unwrap();
    let data: Dataset = synth_dataset(3, 32, tiny.num_classes).unwrap();
    train(&mut trained, &data, None, &cfg.train, |_| {}).unwrap();
    let path = suite.scratch.join("roundtrip").join("model.json");
    checkpoint::save(&trained, &path).unwrap();
    let mut restored = Model::<f32>::new(&tiny, &cfg.recipe, 2).unwrap();
    checkpoint::load_into(&mut restored, &path, checkpoint::LoadScope::All).unwrap();
    let probe = probe_batch::<f32>(&tiny, 7, 4);
    let same_fwd = bits(&trained.predict(&probe).unwrap()) == bits(&restored.predict(&probe).unwrap());
    let path2 = suite.scratch.join("roundtrip").join("again.json");
    checkpoint::save(&restored, &path2).unwrap();
    let same_blob = std::fs::read(path.with_extension("bin")).unwrap() == std::fs::read(path2.with_extension("bin")).unwrap();
    verdict(
        ma == mb && same_fwd && same_blob,
        format!(
            "metrics.csv byte-identical: {}; restored forward bit-exact: {same_fwd}; re-saved blob identical: {same_blob}",
            ma == mb
        ),
    )
}

fn c11_rollout(suite: &mut Suite) -> Verdict {
    if suite.trained.is_empty() {
        train_recorded(suite, small_tiny_config(AdapterRecipe::new(AdapterKind::Icon), 12), "rollout");
    }
    let mut worst = 0.0f64;
    let mut dims_ok = true;
    let trained = suite.trained.clone();
    for (i, (cfg, ckpt)) in trained.iter().enumerate() {
        let out = suite.scratch.join(format!("rollout-{i}"));
        let o = commands::rollout_cmd::<f32>(cfg, ckpt, &RolloutInput::Index(i % 8), &out, &mut sink()).unwrap();
        let m = o.map.len();
        for row in o.matrix.chunks_exact(m) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let (gh, gw) = cfg.model().grid();
        let pgm = std::fs::read(out.join(commands::ROLLOUT_PGM)).unwrap();
        let header = format!("P5\n{gw} {gh}\n255\n");
        let csv = std::fs::read_to_string(out.join(commands::ROLLOUT_CSV)).unwrap();
        dims_ok &= o.grid == (gh, gw)
            && pgm.starts_with(header.as_bytes())
            && pgm.len() == header.len() + gh * gw
            && csv.lines().count() == gh
            && csv.lines().all(|l| l.split(',').count() == gw);
    }
    verdict(
        worst <= ROW_SUM_TOL && dims_ok,
        format!(
            "{} trained tiny models: max |row sum - 1| {worst:.1e} (<= {ROW_SUM_TOL:e}); PGM/CSV are 8x8: {dims_ok}",
            trained.len()
        ),
    )
}
