use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate, SynthSpec, EOS, PAD};
use crate::encoders::{TextEncoderConfig, VisionEncoderConfig};
use crate::model::ModelConfig;
use crate::params::ComponentTag;
use crate::peft::{AdapterConfig, FreezePolicy};

fn tiny_model(vocab_size: usize, adapter: AdapterConfig) -> ModelConfig {
    ModelConfig {
        text: TextEncoderConfig {
            vocab_size,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            max_seq_len: 20,
            eos_token_id: EOS,
            pad_token_id: PAD,
            unlock_positional: false,
        },
        vision: VisionEncoderConfig {
            image_size: 16,
            patch_size: 4,
            channels: 1,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            final_layer_norm: false,
        },
        adapter,
        d_joint: 8,
        tau_init: 0.07,
    }
}

fn tiny_data() -> Dataset {
    generate(&SynthSpec {
        samples_per_class: 20,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn pretrain_cfg(steps: usize, interval: usize) -> PretrainConfig {
    PretrainConfig {
        schedule: ScheduleConfig {
            peak_lr: 2e-3,
            warmup_steps: steps.min(5).saturating_sub(1),
            total_steps: steps,
            min_lr: 0.0,
        },
        adamw: AdamWConfig::default(),
        batch_size: 8,
        eval_interval: interval,
        denominator: Denominator::Inclusive,
        seed: 3,
        max_len: 20,
    }
}

fn setup(adapter: AdapterConfig) -> (Dataset, ClipModel, ParameterStore) {
    let data = tiny_data();
    let (model, mut store) = ClipModel::build(&tiny_model(data.vocab.len(), adapter), 7).unwrap();
    FreezePolicy::stage1().apply(&mut store).unwrap();
    (data, model, store)
}

fn paper_scale_stage1() -> ScheduleConfig {
    ScheduleConfig {
        peak_lr: 4e-5,
        warmup_steps: 4000,
        total_steps: 40_000,
        min_lr: 0.0,
    }
}

#[test]
fn schedule_examples() {
    let c = paper_scale_stage1();
    assert_eq!(lr_at(0, &c), 0.0);
    assert_eq!(lr_at(4000, &c), 4e-5);
    assert!((lr_at(40_000, &c) - 0.0).abs() < 1e-20);
    assert_eq!(lr_at(50_000, &c), 0.0);
    let m = ScheduleConfig { min_lr: 1e-6, ..c };
    assert_eq!(lr_at(40_000, &m), 1e-6);
    assert!((lr_at(22_000, &m) - (1e-6 + 0.5 * (4e-5 - 1e-6))).abs() < 1e-15);
    assert!(ScheduleConfig { warmup_steps: 40_000, ..c }.validate().is_err());
    assert!(ScheduleConfig { min_lr: 1.0, ..c }.validate().is_err());
}

proptest! {
    #[test]
    fn schedule_continuous_and_non_increasing(warmup in 0usize..200, extra in 1usize..2000, s in 0usize..4000) {
        let c = ScheduleConfig { peak_lr: 1e-3, warmup_steps: warmup, total_steps: warmup + extra, min_lr: 1e-5 };
        if warmup > 0 {
            prop_assert!((lr_at(warmup - 1, &c) - c.peak_lr).abs() <= c.peak_lr / warmup as f64 + 1e-15);
        }
        let a = s.max(warmup);
        prop_assert!(lr_at(a + 1, &c) <= lr_at(a, &c) + 1e-18);
        prop_assert!(lr_at(s, &c) >= 0.0 && lr_at(s, &c) <= c.peak_lr);
    }
}

fn one_param_store(shape: &[usize], value: f32) -> ParameterStore {
    let mut s = ParameterStore::new();
    s.insert("w", Tensor::full(shape, value), ComponentTag::Vision).unwrap();
    s
}

#[test]
fn adamw_decay_only_step_and_rank_rule() {
    let mut s = one_param_store(&[2, 3], 0.75);
    s.insert("b", Tensor::full(&[3], 0.75), ComponentTag::Vision).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let (lr, wd) = (1e-2, 0.2);
    opt.step(&mut s, &Grads::new(), lr).unwrap();
    let want = (0.75f64 * (1.0 - lr * wd)) as f32;
    assert!(s.tensor("w").unwrap().data().iter().all(|&v| v == want));
    assert!(s.tensor("b").unwrap().data().iter().all(|&v| v == 0.75));
}

#[test]
fn adamw_constant_gradient_saturates_at_lr() {
    let mut s = one_param_store(&[1, 1], 0.0);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::default()
    });
    let g: Grads = [("w".to_string(), Tensor::full(&[1, 1], 0.3))].into();
    let lr = 1e-3;
    let mut prev = 0.0f64;
    for _ in 0..5000 {
        opt.step(&mut s, &g, lr).unwrap();
        let now = f64::from(s.tensor("w").unwrap().data()[0]);
        let delta = (now - prev).abs();
        assert!(delta <= lr * 1.001, "{delta}");
        prev = now;
    }
    let before = prev;
    opt.step(&mut s, &g, lr).unwrap();
    let delta = (f64::from(s.tensor("w").unwrap().data()[0]) - before).abs();
    assert!((delta - lr).abs() <= 1e-3 * lr, "{delta}");
}

#[test]
fn frozen_entries_untouched_and_nan_named() {
    let mut s = one_param_store(&[2, 2], 1.0);
    s.insert("frozen", Tensor::full(&[2, 2], 1.0), ComponentTag::TextBase).unwrap();
    s.set_trainable("frozen", false).unwrap();
    let g: Grads = [
        ("w".to_string(), Tensor::full(&[2, 2], 1.0)),
        ("frozen".to_string(), Tensor::full(&[2, 2], 1.0)),
    ]
    .into();
    let mut adam = AdamW::new(AdamWConfig::default());
    adam.step(&mut s, &g, 0.1).unwrap();
    assert!(s.tensor("frozen").unwrap().data().iter().all(|&v| v == 1.0));
    assert!(s.tensor("w").unwrap().data().iter().all(|&v| v != 1.0));
    assert_eq!(adam.state_names().collect::<Vec<_>>(), ["w"]);
    let mut sgd = Sgd::new(SgdConfig::default());
    sgd.step(&mut s, &g, 0.1).unwrap();
    assert!(s.tensor("frozen").unwrap().data().iter().all(|&v| v == 1.0));
    let bad: Grads = [("w".to_string(), Tensor::new(vec![2, 2], vec![0.0, f32::NAN, 0.0, 0.0]).unwrap())].into();
    let before = s.clone();
    match adam.step(&mut s, &bad, 0.1) {
        Err(Error::NonFiniteGradient(m)) => assert!(m.contains("w[1]"), "{m}"),
        other => panic!("expected NaN abort, got {other:?}"),
    }
    assert_eq!(s, before);
}

#[test]
fn sgd_momentum_matches_recurrence() {
    let mut s = one_param_store(&[1], 1.0);
    let mut opt = Sgd::new(SgdConfig {
        momentum: 0.9,
        weight_decay: 0.0,
    });
    let g: Grads = [("w".to_string(), Tensor::full(&[1], 0.5))].into();
    let (mut w, mut buf) = (1.0f64, 0.0f64);
    for _ in 0..10 {
        opt.step(&mut s, &g, 0.1).unwrap();
        buf = 0.9 * buf + 0.5;
        w = f64::from((w - 0.1 * buf) as f32);
        assert_eq!(s.tensor("w").unwrap().data()[0], w as f32);
    }
}

#[test]
fn tau_stays_positive_and_clamped_under_random_steps() {
    let mut s = ParameterStore::new();
    Temperature::from_tau(0.07).unwrap().register(&mut s).unwrap();
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let g: Grads = [(Temperature::PARAM.to_string(), Tensor::scalar(rng.random_range(-50.0..50.0)))].into();
        opt.step(&mut s, &g, rng.random_range(0.0..5.0)).unwrap();
        Temperature::clamp_in_store(&mut s).unwrap();
        let tau = Temperature::read(&s).unwrap().tau();
        assert!(tau > 0.0 && (TAU_MIN_CHECK..=TAU_MAX_CHECK).contains(&tau), "{tau}");
    }
}

const TAU_MIN_CHECK: f32 = crate::objectives::TAU_MIN * 0.9999;
const TAU_MAX_CHECK: f32 = crate::objectives::TAU_MAX * 1.0001;

#[test]
fn zero_steps_returns_init() {
    let (data, model, mut store) = setup(AdapterConfig::lora_default());
    let init = store.clone();
    let mut v = ScriptedValidator { losses: vec![], calls: 0 };
    let out = pretrain_loop(&model, &mut store, &data, &pretrain_cfg(0, 10), &mut v, |_| {}).unwrap();
    assert_eq!(out.best, init);
    assert_eq!(store, init);
    assert!(out.metrics.is_empty());
}

#[test]
fn best_checkpoint_is_argmin_validation() {
    let (data, model, store0) = setup(AdapterConfig::lora_default());
    let mut store = store0.clone();
    let mut v = ScriptedValidator {
        losses: vec![3.0, 1.0, 2.0],
        calls: 0,
    };
    let out = pretrain_loop(&model, &mut store, &data, &pretrain_cfg(30, 10), &mut v, |_| {}).unwrap();
    assert_eq!((out.best_step, out.best_val_loss), (20, Some(1.0)));
    // Replaying the first 20 steps reproduces the saved parameters.
    let mut replay = store0.clone();
    let mut cfg = pretrain_cfg(30, 10);
    let mut v2 = ScriptedValidator {
        losses: vec![0.0; 3],
        calls: 0,
    };
    let mut opt_rows = Vec::new();
    cfg.schedule.total_steps = 30;
    let full = pretrain_loop(&model, &mut replay, &data, &cfg, &mut v2, |r| opt_rows.push(r.clone())).unwrap();
    assert_eq!(full.best_step, 10);
    assert_eq!(replay, store);
    assert_ne!(out.best, store);
    assert_eq!(out.metrics.iter().filter(|r| r.split == "val").count(), 3);
    assert_eq!(opt_rows.len(), 33);
}

#[test]
fn stage1_freeze_integrity_gradient_flow_and_determinism() {
    let (data, model, store0) = setup(AdapterConfig::lora_default());
    let batch = load_batches(&data, Split::Train, 8, 0, BatchMode::Train, 20)
        .unwrap()
        .next()
        .unwrap()
        .unwrap();
    let mut sess = Session::new(&store0);
    let l = model.contrastive_loss(&mut sess, &batch, Denominator::Inclusive).unwrap();
    sess.graph.backward(l.total).unwrap();
    let grads = sess.grads();
    let nonzero = |name: &str| grads.get(name).is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
    assert!(nonzero(crate::encoders::TextEncoder::TOKEN_EMBEDDING));
    assert!(grads
        .keys()
        .any(|k| store0.get(k).unwrap().tag == ComponentTag::Adapter && nonzero(k)));
    assert!(grads.keys().all(|k| store0.get(k).unwrap().tag != ComponentTag::TextBase));

    let run = || {
        let mut store = store0.clone();
        let mut v = ScriptedValidator { losses: vec![1.0; 8], calls: 0 };
        let out = pretrain_loop(&model, &mut store, &data, &pretrain_cfg(25, 10), &mut v, |_| {}).unwrap();
        (store, out.metrics)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let changed = a.changed_since(&store0);
    for name in &changed {
        assert_ne!(a.get(name).unwrap().tag, ComponentTag::TextBase, "{name}");
    }
    assert!(changed.iter().any(|n| n.starts_with("vision.")));
}

#[test]
fn frozen_teacher_text_outputs_constant_while_images_align() {
    let (data, model, mut store) = setup(AdapterConfig::None);
    FreezePolicy::freeze_lm().apply(&mut store).unwrap();
    let probe = load_batches(&data, Split::Val, 8, 0, BatchMode::Eval, 20)
        .unwrap()
        .next()
        .unwrap()
        .unwrap();
    let align = |store: &ParameterStore| {
        let t = model.embed_texts(store, &probe.texts).unwrap();
        let i = model.embed_images(store, &probe.images, 8).unwrap();
        let cos: f64 = (0..t.rows())
            .map(|r| t.row(r).iter().zip(i.row(r)).map(|(a, b)| f64::from(a * b)).sum::<f64>())
            .sum();
        let n = t.rows() as f64;
        (model.text_hidden(store, &probe.texts).unwrap(), cos / n)
    };
    let (t0, c0) = align(&store);
    let mut v = ScriptedValidator { losses: vec![1.0; 10], calls: 0 };
    pretrain_loop(&model, &mut store, &data, &pretrain_cfg(60, 30), &mut v, |_| {}).unwrap();
    let (t1, c1) = align(&store);
    for (a, b) in t0.data().iter().zip(t1.data()) {
        assert!((a - b).abs() <= 1e-6);
    }
    assert!(c1 > c0, "{c0} -> {c1}");
}

#[test]
fn metrics_csv_round_trip() {
    let rows = vec![
        MetricRow {
            step: 1,
            split: "train".into(),
            loss: 2.5,
            lr: 1e-4,
            tau: 0.07,
            acc: Some(0.25),
        },
        MetricRow {
            step: 2,
            split: "val".into(),
            loss: 2.25,
            lr: 2e-4,
            tau: 0.0625,
            acc: None,
        },
    ];
    let mut buf = Vec::new();
    write_metrics(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("step,split,loss,lr,tau,acc\n1,train,"));
    assert_eq!(parse_metrics(&text).unwrap(), rows);
    assert!(parse_metrics("bad\n").is_err());
}
