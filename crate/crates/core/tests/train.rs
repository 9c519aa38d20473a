mod common;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use common::*;
use icon_peft_core::adapters::{AdapterKind, AdapterRecipe};
use icon_peft_core::backbone::ViTConfig;
use icon_peft_core::model::Model;
use icon_peft_core::params::Role;
use icon_peft_core::train::{count_correct, evaluate, synth_dataset, train, AdamW, AdamWConfig, Dataset, Split, TrainConfig};
use icon_peft_core::{Error, Tensor};

fn cfg() -> ViTConfig {
    ViTConfig {
        image_size: 32,
        patch_size: 8,
        in_channels: 3,
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        mlp_ratio: 2,
        num_classes: 4,
        ln_eps: 1e-6,
    }
}

fn recipe(kind: AdapterKind) -> AdapterRecipe {
    let mut r = AdapterRecipe::new(kind).with_dim(4);
    r.lora_rank = 2;
    r
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        seed,
        ..TrainConfig::default()
    }
}

fn frozen_hash(model: &Model<f32>) -> u64 {
    let mut h = DefaultHasher::new();
    for (e, t) in model.registry().entries().iter().zip(model.store.tensors()) {
        if !e.trainable {
            e.name.hash(&mut h);
            t.data().iter().for_each(|v| v.to_bits().hash(&mut h));
        }
    }
    h.finish()
}

#[test]
fn frozen_parameters_survive_training() {
    let data = synth_dataset(1, 32, 4).unwrap();
    for kind in AdapterKind::ALL.into_iter().filter(|&k| k != AdapterKind::Full) {
        let mut m = Model::<f32>::new(&cfg(), &recipe(kind), 2).unwrap();
        let before = frozen_hash(&m);
        let trainable_before = m.store.clone();
        train(&mut m, &data, None, &quick(3, 3), |_| {}).unwrap();
        assert_eq!(frozen_hash(&m), before, "{kind:?}");
        if kind != AdapterKind::Frozen {
            assert_ne!(m.store, trainable_before, "{kind:?} should move");
        }
    }
}

#[test]
fn training_is_deterministic() {
    let data = synth_dataset(4, 24, 4).unwrap();
    let held = synth_dataset(5, 8, 4).unwrap();
    let run = || {
        let mut m = Model::<f32>::new(&cfg(), &recipe(AdapterKind::Icon), 6).unwrap();
        let hist = train(&mut m, &data, Some(&held), &quick(2, 7), |_| {}).unwrap();
        (hist, m)
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    assert_eq!(h1.len(), 4);
    assert_eq!(h1.iter().map(|r| r.split).collect::<Vec<_>>(), [Split::Train, Split::Eval, Split::Train, Split::Eval]);
    let key = |h: &[icon_peft_core::train::EpochMetrics]| h.iter().map(|r| (r.loss.to_bits(), r.accuracy.to_bits())).collect::<Vec<_>>();
    assert_eq!(key(&h1), key(&h2));
    assert_eq!(m1, m2);
}

#[test]
fn optimizer_state_matches_trainable_set() {
    let data = synth_dataset(8, 8, 4).unwrap();
    let (x, y) = data.batch::<f32>(&(0..8).collect::<Vec<_>>()).unwrap();
    for kind in AdapterKind::ALL {
        let mut m = Model::<f32>::new(&cfg(), &recipe(kind), 9).unwrap();
        let frozen_before = frozen_hash(&m);
        let mut opt = AdamW::new(AdamWConfig::default());
        for _ in 0..3 {
            m.store.zero_grads();
            m.loss_and_grad(&x, &y).unwrap();
            opt.step(&mut m.store).unwrap();
        }
        let mut trainable: Vec<&str> = m.registry().entries().iter().filter(|e| e.trainable).map(|e| e.name.as_str()).collect();
        trainable.sort_unstable();
        assert_eq!(opt.state_keys().collect::<Vec<_>>(), trainable, "{kind:?}");
        assert_eq!(frozen_hash(&m), frozen_before);
        assert_eq!(opt.steps(), 3);
    }
}

#[test]
fn weight_decay_skips_bias_norm_and_scale() {
    let mut m = Model::<f64>::new(&cfg(), &recipe(AdapterKind::Full), 10).unwrap();
    randomize(&mut m.store, 11, 1.0);
    let before = m.store.clone();
    let cfg = AdamWConfig {
        weight_decay: 0.5,
        lr: 0.1,
        ..AdamWConfig::default()
    };
    let mut opt = AdamW::new(cfg);
    m.store.zero_grads();
    opt.step(&mut m.store).unwrap();
    for (i, e) in m.registry().entries().iter().enumerate() {
        let (old, new) = (before.tensors()[i].data(), m.store.tensors()[i].data());
        if e.role.decays() {
            assert!(matches!(e.role, Role::Weight | Role::Embedding));
            for (a, b) in old.iter().zip(new) {
                assert!((b - a * 0.95).abs() < 1e-15, "{}", e.name);
            }
        } else {
            assert_eq!(old, new, "{}", e.name);
        }
    }
}

#[test]
fn nan_loss_aborts_with_step() {
    let mut data = synth_dataset(12, 16, 4).unwrap();
    let mut images: Vec<f32> = (0..data.len()).flat_map(|i| data.image(i).to_vec()).collect();
    let per = data.image_numel();
    images.iter_mut().skip(per * 3).take(per).for_each(|v| *v = f32::NAN);
    data = Dataset::new(3, 32, 4, images, data.labels().to_vec()).unwrap();
    let mut m = Model::<f32>::new(&cfg(), &recipe(AdapterKind::LinearProbe), 13).unwrap();
    let cfg = TrainConfig { batch_size: 4, ..quick(1, 14) };
    match train(&mut m, &data, None, &cfg, |_| {}) {
        Err(Error::NanLoss { epoch: 0, step }) => assert!(step < 4),
        other => panic!("expected NaN abort, got {other:?}"),
    }
    let empty = Dataset::new(3, 32, 4, vec![], vec![]).unwrap();
    assert!(matches!(train(&mut m, &empty, None, &cfg, |_| {}), Err(Error::Data(_))));
}

#[test]
fn evaluate_counts_argmax_matches_and_does_not_mutate() {
    let data = synth_dataset(15, 20, 4).unwrap();
    let m = Model::<f32>::new(&cfg(), &recipe(AdapterKind::Icon), 16).unwrap();
    let before = m.clone();
    let ev = evaluate(&m, &data, 6).unwrap();
    assert_eq!(m, before);
    let (x, y) = data.batch::<f32>(&(0..20).collect::<Vec<_>>()).unwrap();
    let logits = m.predict(&x).unwrap();
    let hits = logits
        .data()
        .chunks(4)
        .zip(&y)
        .filter(|(row, &l)| {
            let best = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            row.iter().position(|&v| v == best) == Some(l)
        })
        .count();
    assert_eq!(ev.accuracy, hits as f64 / 20.0);
    assert!(ev.loss.is_finite() && ev.loss > 0.0);
}

#[test]
fn random_logits_score_chance() {
    let (n, k) = (4000, 5);
    let logits = Tensor::from_f64([n, k], &uniform(&mut rng(17), n * k, 1.0)).unwrap();
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let acc = count_correct::<f64>(&logits, &labels) as f64 / n as f64;
    assert!((acc - 0.2).abs() < 0.03, "{acc}");
}

#[test]
fn full_tuning_memorizes_small_set() {
    let data = synth_dataset(18, 12, 4).unwrap();
    let mut m = Model::<f32>::new(&cfg(), &recipe(AdapterKind::Full), 19).unwrap();
    let cfg = TrainConfig {
        learning_rate: Some(3e-3),
        batch_size: 12,
        ..quick(150, 20)
    };
    train(&mut m, &data, None, &cfg, |_| {}).unwrap();
    assert_eq!(evaluate(&m, &data, 12).unwrap().accuracy, 1.0);
}

#[test]
fn full_tuning_loss_does_not_rise_early() {
    let data = synth_dataset(21, 64, 4).unwrap();
    let mut m = Model::<f32>::new(&cfg(), &recipe(AdapterKind::Full), 22).unwrap();
    let hist = train(&mut m, &data, None, &quick(3, 23), |_| {}).unwrap();
    for w in hist.windows(2) {
        assert!(w[1].loss <= w[0].loss, "{hist:?}");
    }
}
