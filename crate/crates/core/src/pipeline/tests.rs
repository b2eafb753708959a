use super::*;
use crate::error::Error;
use crate::io::Dataset;
use crate::model::{init_model, StackConfig};
use crate::synth::{generate, SynthConfig};

fn tiny() -> (Dataset, StackConfig, TrainConfig) {
    let ds = generate(&SynthConfig { classes: 3, per_class: 16, dim: 6, spread: 0.3, seed: 4 }).unwrap();
    let stack = StackConfig {
        input_dim: 6,
        encoder_hidden_dims: vec![10],
        feature_dim: 8,
        projector_hidden_dim: 10,
        projection_dim: 5,
        predictor_hidden_dim: 10,
    };
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        store_capacity: 24,
        warmup_lr_epochs: 1,
        purity_k: 4,
        seed: 3,
        loss: crate::objective::LossConfig {
            k: 3,
            warmup_epochs: Some(1),
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    (ds, stack, cfg)
}

fn without_time(records: &[StepRecord]) -> Vec<StepRecord> {
    records
        .iter()
        .map(|r| StepRecord { wall_ms: 0.0, ..r.clone() })
        .collect()
}

#[test]
fn zero_epochs_returns_the_initial_state() {
    let (ds, stack, cfg) = tiny();
    let cfg = TrainConfig { epochs: 0, ..cfg };
    let out = pretrain(&ds, &stack, &cfg, &AugmentConfig::default()).unwrap();
    assert!(out.metrics.is_empty());
    let init = init_model(&stack, cfg.seed).unwrap();
    assert_eq!(out.model, init);
    assert_eq!(out.store.fill(), 0);
}

#[test]
fn runs_are_bit_identical() {
    let (ds, stack, cfg) = tiny();
    let a = pretrain(&ds, &stack, &cfg, &AugmentConfig::default()).unwrap();
    let b = pretrain(&ds, &stack, &cfg, &AugmentConfig::default()).unwrap();
    assert_eq!(without_time(&a.metrics), without_time(&b.metrics));
    assert_eq!(a.metrics.last().unwrap().loss.to_bits(), b.metrics.last().unwrap().loss.to_bits());
    assert_eq!(a.model, b.model);
}

#[test]
fn thread_count_does_not_change_results() {
    let (ds, stack, cfg) = tiny();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| pretrain(&ds, &stack, &cfg, &AugmentConfig::default()).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(without_time(&a.metrics), without_time(&b.metrics));
}

#[test]
fn metrics_stream_shape() {
    let (ds, stack, cfg) = tiny();
    let out = pretrain(&ds, &stack, &cfg, &AugmentConfig::default()).unwrap();
    let spe = ds.len() / cfg.batch_size;
    assert_eq!(out.metrics.len(), cfg.epochs * spe);
    for (i, r) in out.metrics.iter().enumerate() {
        assert_eq!(r.step, i);
        assert_eq!(r.epoch, i / spe);
        assert_eq!(r.store_fill, ((i + 1) * cfg.batch_size).min(cfg.store_capacity));
        assert_eq!(r.neighbor_purity.is_some(), (i + 1) % spe == 0);
        assert!(r.loss.is_finite() && r.loss > 0.0);
    }
    assert_eq!(out.metrics[0].lr, LR_FLOOR);
}

#[test]
fn each_step_applies_exactly_one_ema_update() {
    let (ds, stack, cfg) = tiny();
    let mut t = Trainer::new(&ds, &stack, &cfg, &AugmentConfig::default()).unwrap();
    for _ in 0..3 {
        let before = t.model().momentum.clone();
        let fill = t.store().fill();
        t.step_once().unwrap();
        let c = t.model().ema_coeff;
        let after = &t.model().momentum;
        let online = &t.model().online;
        for (name, pm) in after.params.iter().chain(&after.buffers) {
            let prev = before.params.get(name).or(before.buffers.get(name)).unwrap();
            let po = online.params.get(name).or(online.buffers.get(name)).unwrap();
            for ((m, p), o) in pm.data().iter().zip(prev.data()).zip(po.data()) {
                assert!((m - (c * p + (1.0 - c) * o)).abs() <= 1e-12, "{name}");
            }
        }
        assert_eq!(t.store().fill(), (fill + cfg.batch_size).min(cfg.store_capacity));
    }
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let (ds, stack, cfg) = tiny();
    let aug = AugmentConfig::default();
    let full = pretrain(&ds, &stack, &cfg, &aug).unwrap();

    let mut first = Trainer::new(&ds, &stack, &cfg, &aug).unwrap();
    let mut records = Vec::new();
    first
        .run_until(7, |_, r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
    let state = first.state();
    drop(first);
    let mut second = Trainer::resume(&ds, &cfg, &aug, state).unwrap();
    second
        .run_until(usize::MAX, |_, r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
    assert_eq!(without_time(&records), without_time(&full.metrics));
    assert_eq!(second.model(), &full.model);
}

#[test]
fn warmup_epochs_use_the_vanilla_loss() {
    let (ds, stack, cfg) = tiny();
    let mut t = Trainer::new(&ds, &stack, &cfg, &AugmentConfig::default()).unwrap();
    let spe = t.steps_per_epoch();
    for step in 0..2 * spe {
        t.step_once().unwrap();
        assert_eq!(t.last_loss().unwrap().used_neighbors, step >= spe);
    }
}

#[test]
fn unset_warmup_is_a_tenth_of_the_run() {
    let (ds, stack, cfg) = tiny();
    let mut cfg = TrainConfig { epochs: 30, ..cfg };
    cfg.loss.warmup_epochs = None;
    let t = Trainer::new(&ds, &stack, &cfg, &AugmentConfig::default()).unwrap();
    assert_eq!(t.config().loss.warmup_epochs, Some(3));
}

#[test]
fn contract_violations_surface_before_training() {
    let (ds, stack, cfg) = tiny();
    let aug = AugmentConfig::default();
    let big = TrainConfig { batch_size: ds.len() + 1, store_capacity: 4096, ..cfg.clone() };
    assert!(matches!(Trainer::new(&ds, &stack, &big, &aug), Err(Error::Config(_))));
    let wide = StackConfig { input_dim: 7, ..stack.clone() };
    assert!(matches!(Trainer::new(&ds, &wide, &cfg, &aug), Err(Error::Config(_))));
    let small_store = TrainConfig { store_capacity: 4, ..cfg.clone() };
    assert!(Trainer::new(&ds, &stack, &small_store, &aug).is_err());
    let mut t = Trainer::new(&ds, &stack, &TrainConfig { epochs: 0, ..cfg }, &aug).unwrap();
    assert!(t.step_once().is_err());
}
