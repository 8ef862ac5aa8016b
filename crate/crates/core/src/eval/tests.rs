use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::config::RunConfig;
use crate::data::{generate, SynthSpec};

/// O(n^2) oracle: fraction of (positive, negative) pairs ranked correctly,
/// ties counted one half.
fn pair_count_auc(scores: &Tensor, labels: &[usize]) -> Option<f64> {
    let c = scores.last_dim();
    let mut aucs = Vec::new();
    for k in 0..c {
        let (mut wins, mut pairs) = (0.0f64, 0usize);
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] == k && labels[j] != k {
                    let (a, b) = (scores.row(i)[k], scores.row(j)[k]);
                    wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
                    pairs += 1;
                }
            }
        }
        if pairs > 0 {
            aucs.push(wins / pairs as f64);
        }
    }
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

fn random_unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let row: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        data.extend(row.iter().map(|v| v / norm));
    }
    Tensor::new(vec![n, d], data).unwrap()
}

#[test]
fn auc_trivial_cases() {
    let sep = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.8, 0.2], vec![0.3, 0.7], vec![0.1, 0.9]]).unwrap();
    assert_eq!(auc_ovr(&sep, &[0, 0, 1, 1]).unwrap().macro_auc, 1.0);
    let flat = Tensor::full(&[6, 3], 0.5);
    assert_eq!(auc_ovr(&flat, &[0, 1, 2, 0, 1, 2]).unwrap().macro_auc, 0.5);
    assert!(matches!(auc_ovr(&flat, &[1; 6]), Err(Error::UndefinedAuc(_))));
    let r = auc_ovr(&flat, &[0, 1, 0, 1, 0, 1]).unwrap();
    assert_eq!(r.skipped_classes, vec![2]);
}

proptest! {
    #[test]
    fn auc_matches_pair_counting_oracle(seed in 0u64..10_000, n in 2usize..=40, c in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Coarse integer scores force ties.
        let data: Vec<f32> = (0..n * c).map(|_| rng.random_range(0..5) as f32).collect();
        let scores = Tensor::new(vec![n, c], data).unwrap();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        match (auc_ovr(&scores, &labels), pair_count_auc(&scores, &labels)) {
            (Ok(a), Some(b)) => prop_assert_eq!(a.macro_auc, b),
            (Err(Error::UndefinedAuc(_)), None) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 30;
        let data: Vec<f32> = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let scores = Tensor::new(vec![n, 3], data.clone()).unwrap();
        let warped = Tensor::new(vec![n, 3], data.iter().map(|v| v.exp() * 3.0 + 1.0).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        prop_assert_eq!(auc_ovr(&scores, &labels).unwrap(), auc_ovr(&warped, &labels).unwrap());
    }

    #[test]
    fn zero_shot_argmax_invariant_to_tau(seed in 0u64..10_000, tau_a in 0.001f32..100.0, tau_b in 0.001f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = random_unit_rows(&mut rng, 8, 6);
        let cls = random_unit_rows(&mut rng, 4, 6);
        prop_assert_eq!(zero_shot_predict(&img, &cls, tau_a).unwrap(), zero_shot_predict(&img, &cls, tau_b).unwrap());
    }
}

#[test]
fn zero_shot_engineered_and_chance() {
    let cls = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let img = Tensor::from_rows(&[vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
    let preds = zero_shot_predict(&img, &cls, 0.07).unwrap();
    let r = EvalReport::from_predictions(Protocol::ZeroShot, &preds, &[2, 0, 1], 3, None).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert!(r.auc.is_none());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 4000;
    let img = random_unit_rows(&mut rng, n, 16);
    let cls = random_unit_rows(&mut rng, 5, 16);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
    let preds = zero_shot_predict(&img, &cls, 0.07).unwrap();
    let acc = EvalReport::from_predictions(Protocol::ZeroShot, &preds, &labels, 5, None).unwrap().accuracy;
    assert!((acc - 0.2).abs() <= 0.05, "{acc}");
    assert!(zero_shot_scores(&img, &Tensor::ones(&[1, 16]), 1.0).is_err());
}

#[test]
fn report_per_class_weighting_is_exact() {
    let labels = [0, 0, 0, 1, 2, 2];
    let preds = [0, 1, 0, 1, 0, 2];
    let r = EvalReport::from_predictions(Protocol::LinearProbe, &preds, &labels, 4, None).unwrap();
    let weighted: f64 = r
        .per_class_accuracy
        .iter()
        .zip(&r.class_counts)
        .map(|(a, &c)| a.unwrap_or(0.0) * c as f64)
        .sum::<f64>()
        / r.n_samples as f64;
    assert_eq!(weighted, r.accuracy);
    assert_eq!(r.per_class_accuracy[3], None);
    assert_eq!(r.accuracy, 4.0 / 6.0);
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(json["protocol"], "LP");
}

fn probe_cfg(steps: usize) -> ProbeConfig {
    ProbeConfig {
        batch_size: 8,
        steps,
        lr: 5e-2,
        weight_decay: 1e-3,
        seed: 1,
    }
}

#[test]
fn probe_separates_separable_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let make = |rng: &mut ChaCha8Rng, n: usize| {
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let rows: Vec<Vec<f32>> = labels
            .iter()
            .map(|&l| {
                let s = if l == 0 { -1.0 } else { 1.0 };
                vec![s + rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0)]
            })
            .collect();
        (Tensor::from_rows(&rows).unwrap(), labels)
    };
    let (tr, trl) = make(&mut rng, 40);
    let (te, tel) = make(&mut rng, 40);
    let (r, head) = linear_probe(&tr, &trl, &te, &tel, 2, &probe_cfg(200)).unwrap();
    assert_eq!((r.accuracy, r.auc), (1.0, Some(1.0)));
    assert!(head.iter().all(|(_, p)| p.tag == ComponentTag::Probe));
    assert!(matches!(linear_probe(&tr, &[1; 40], &te, &tel, 2, &probe_cfg(1)), Err(Error::Config(_))));
}

fn tiny() -> (Dataset, ClipModel, ParameterStore) {
    let mut cfg = RunConfig::toy();
    cfg.text_d_model = 8;
    cfg.vision_d_model = 8;
    cfg.text_heads = 2;
    cfg.vision_heads = 2;
    cfg.text_layers = 1;
    cfg.vision_layers = 1;
    cfg.d_joint = 8;
    cfg.samples_per_class = 20;
    let data = generate(&cfg.synth_spec()).unwrap();
    let (model, store) = ClipModel::build(&cfg.model_config(data.vocab.len()).unwrap(), 0).unwrap();
    (data, model, store)
}

#[test]
fn probe_leaves_encoder_untouched_and_zero_step_ft_equals_probe_at_init() {
    let (data, model, store) = tiny();
    let before = store.clone();
    let train = data.split_indices(Split::Train);
    let lp = linear_probe_model(&model, &store, &data, &train, &probe_cfg(0)).unwrap();
    assert_eq!(store, before);
    let (ft, tuned) = full_finetune(&model, &store, &data, &train, &probe_cfg(0)).unwrap();
    assert_eq!(lp.accuracy, ft.accuracy);
    assert_eq!(lp.auc, ft.auc);
    assert_eq!(lp.per_class_accuracy, ft.per_class_accuracy);
    assert!(tuned.contains(PROBE_WEIGHT));
    let (ft2, _) = full_finetune(&model, &store, &data, &train, &probe_cfg(3)).unwrap();
    let (ft3, _) = full_finetune(&model, &store, &data, &train, &probe_cfg(3)).unwrap();
    assert_eq!(ft2, ft3);
}

#[test]
fn stratified_subsets_are_seeded_and_sized() {
    let data = generate(&SynthSpec {
        samples_per_class: 100,
        ..SynthSpec::default()
    })
    .unwrap();
    let per_class = |idx: &[usize], c: usize| idx.iter().filter(|&&i| data.samples[i].label == c).count();
    for (ratio, want) in [(0.01, 1), (0.1, 7), (1.0, 70)] {
        let idx = stratified_subset(&data, ratio, 3).unwrap();
        for c in 0..4 {
            assert_eq!(per_class(&idx, c), want, "ratio {ratio}");
        }
        assert!(idx.iter().all(|&i| data.samples[i].split == Split::Train));
    }
    assert_eq!(stratified_subset(&data, 0.1, 3).unwrap(), stratified_subset(&data, 0.1, 3).unwrap());
    assert_ne!(stratified_subset(&data, 0.1, 3).unwrap(), stratified_subset(&data, 0.1, 4).unwrap());
    assert!(stratified_subset(&data, 0.0, 1).is_err());
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0]), 2.5);
}

#[test]
fn published_ratios() {
    let r = published_ratio_report().unwrap();
    let total = r.get("published_total_trainable_M").unwrap();
    assert!((100.0 * total.reduction() - 39.0).abs() <= 0.1);
    assert_eq!(total.ratio, 93.70 / 153.59);
    let lm = r.get("published_language_model_trainable_M").unwrap();
    assert!((100.0 * lm.ratio - 3.94).abs() <= 0.05);
    let text = r.to_string();
    assert!(text.contains("39.0%") && text.contains("3.94%"), "{text}");
    assert!(RatioRow::new("x", 1.0, 0.0).is_err());
    assert_eq!(sig3(0.0393746), "0.0394");
    assert_eq!(sig3(153.59), "154");
}

#[test]
fn toy_ratios_match_closed_form() {
    let cfg = RunConfig::toy();
    let data = generate(&cfg.synth_spec()).unwrap();
    let v = data.vocab.len();
    let (_, store) = ClipModel::build(&cfg.model_config(v).unwrap(), 0).unwrap();
    let (d, l, s, r) = (cfg.text_d_model, cfg.text_layers, cfg.max_seq_len, cfg.lora_rank);
    let block = |d: usize| 12 * d * d + 13 * d;
    let text_base = l * block(d) + 2 * d + s * d;
    let lora = l * cfg.lora_targets.len() * 2 * d * r;
    let dv = cfg.vision_d_model;
    let patches = (cfg.image_size / cfg.patch_size).pow(2);
    let vision = cfg.patch_size.pow(2) * dv + dv + patches * dv + cfg.vision_layers * block(dv);
    let heads = (d + dv) * cfg.d_joint + 1;
    let ours = trainable_counts(&store, &FreezePolicy::stage1()).unwrap();
    let baseline = trainable_counts(&store, &FreezePolicy::full_ft_lm()).unwrap();
    assert_eq!(ours.total, v * d + lora + vision + heads);
    assert_eq!(baseline.total, v * d + lora + text_base + vision + heads);
    let rep = param_ratio_report(&ours, &baseline).unwrap();
    assert_eq!(rep.get("total_trainable").unwrap().ratio, ours.total as f64 / baseline.total as f64);
    assert_eq!(
        rep.get("language_model_trainable").unwrap().ratio,
        lora as f64 / (lora + text_base) as f64
    );
}
