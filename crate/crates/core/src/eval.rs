//! Evaluation protocols (zero-shot, linear probe, full fine-tune), macro
//! one-vs-rest AUC, data-ratio sweeps and trainable-parameter ratios.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ClipModel;
use crate::objectives::{argmax, zero_shot_logits, Temperature};
use crate::params::{ComponentTag, ParameterStore, Session};
use crate::peft::{count_params, CountFilter, FreezePolicy, ParamCounts, INIT_STD};
use crate::tensor::Tensor;
use crate::training::{AdamW, AdamWConfig, Optimizer};

pub const PROBE_WEIGHT: &str = "probe.weight";
pub const PROBE_BIAS: &str = "probe.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "ZS")]
    ZeroShot,
    #[serde(rename = "LP")]
    LinearProbe,
    #[serde(rename = "FT")]
    FineTune,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::ZeroShot => "ZS",
            Protocol::LinearProbe => "LP",
            Protocol::FineTune => "FT",
        })
    }
}

/// AUC is macro one-vs-rest over classes that have both positives and
/// negatives; the others are listed in `auc_skipped_classes`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub auc_skipped_classes: Vec<usize>,
    pub n_samples: usize,
    pub class_counts: Vec<usize>,
    /// `None` for classes absent from the evaluated split.
    pub per_class_accuracy: Vec<Option<f64>>,
}

impl EvalReport {
    /// Builds a report from argmax predictions. `scores` (`[n, C]`) enables AUC.
    pub fn from_predictions(
        protocol: Protocol,
        predictions: &[usize],
        labels: &[usize],
        n_classes: usize,
        scores: Option<&Tensor>,
    ) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(Error::Dimension {
                op: "eval_report",
                lhs: vec![predictions.len()],
                rhs: vec![labels.len()],
            });
        }
        let mut counts = vec![0usize; n_classes];
        let mut correct = vec![0usize; n_classes];
        for (&p, &l) in predictions.iter().zip(labels) {
            if l >= n_classes {
                return Err(Error::Index {
                    what: "class label",
                    index: l,
                    bound: n_classes,
                });
            }
            counts[l] += 1;
            correct[l] += usize::from(p == l);
        }
        let n = labels.len();
        let (auc, skipped) = match scores {
            Some(s) => {
                let r = auc_ovr(s, labels)?;
                (Some(r.macro_auc), r.skipped_classes)
            }
            None => (None, Vec::new()),
        };
        Ok(Self {
            protocol,
            accuracy: correct.iter().sum::<usize>() as f64 / n.max(1) as f64,
            auc,
            auc_skipped_classes: skipped,
            n_samples: n,
            per_class_accuracy: counts
                .iter()
                .zip(&correct)
                .map(|(&c, &k)| (c > 0).then(|| k as f64 / c as f64))
                .collect(),
            class_counts: counts,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serialises")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucResult {
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

/// Mann-Whitney AUC of one score column: midranks make ties count one half.
fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Macro one-vs-rest AUC of `scores` (`[n, C]`).
pub fn auc_ovr(scores: &Tensor, labels: &[usize]) -> Result<AucResult> {
    let (n, c) = (scores.rows(), scores.last_dim());
    if scores.shape().len() != 2 || labels.len() != n {
        return Err(Error::Dimension {
            op: "auc_ovr",
            lhs: scores.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Index {
            what: "class label",
            index: bad,
            bound: c,
        });
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let col: Vec<f64> = (0..n).map(|i| f64::from(scores.row(i)[k])).collect();
            let pos: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            binary_auc(&col, &pos)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::UndefinedAuc("no class has both positive and negative samples".into()));
    }
    Ok(AucResult {
        macro_auc: defined.iter().sum::<f64>() / defined.len() as f64,
        skipped_classes: (0..c).filter(|&k| per_class[k].is_none()).collect(),
        per_class,
    })
}

/// Zero-shot logits for every image feature row, `[n, C]`.
pub fn zero_shot_scores(image_features: &Tensor, class_embeddings: &Tensor, tau: f32) -> Result<Tensor> {
    if class_embeddings.rows() < 2 {
        return Err(Error::Config("zero-shot classification needs at least two classes".into()));
    }
    let mut data = Vec::with_capacity(image_features.rows() * class_embeddings.rows());
    for i in 0..image_features.rows() {
        data.extend(
            zero_shot_logits(image_features.row(i), class_embeddings, tau)?
                .into_iter()
                .map(|v| v as f32),
        );
    }
    Tensor::new(vec![image_features.rows(), class_embeddings.rows()], data)
}

/// Argmax predictions from precomputed features; lowest class wins ties.
pub fn zero_shot_predict(image_features: &Tensor, class_embeddings: &Tensor, tau: f32) -> Result<Vec<usize>> {
    (0..image_features.rows())
        .map(|i| zero_shot_logits(image_features.row(i), class_embeddings, tau).map(|l| argmax(&l)))
        .collect()
}

/// Zero-shot protocol against fixed class embeddings (handcrafted prompts or
/// a learned context). No AUC is reported.
pub fn zero_shot_classify(
    model: &ClipModel,
    store: &ParameterStore,
    class_embeddings: &Tensor,
    images: &[Tensor],
    labels: &[usize],
) -> Result<EvalReport> {
    let feats = model.embed_images(store, images, 64)?;
    let tau = Temperature::read(store)?.tau();
    let preds = zero_shot_predict(&feats, class_embeddings, tau)?;
    EvalReport::from_predictions(Protocol::ZeroShot, &preds, labels, class_embeddings.rows(), None)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

pub type FinetuneConfig = ProbeConfig;

/// Registers a fresh `[d, C]` linear head tagged [`ComponentTag::Probe`].
pub fn init_head(store: &mut ParameterStore, d: usize, n_classes: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.insert_normal(&mut rng, PROBE_WEIGHT, &[d, n_classes], INIT_STD, ComponentTag::Probe)?;
    store.insert(PROBE_BIAS, Tensor::zeros(&[n_classes]), ComponentTag::Probe)
}

fn head_logits(sess: &mut Session, features: Var) -> Result<Var> {
    let w = sess.param(PROBE_WEIGHT)?;
    let b = sess.param(PROBE_BIAS)?;
    let z = sess.graph.matmul(features, w)?;
    sess.graph.add_bias(z, b)
}

/// Seeded epoch-wise minibatch order over a fixed index set.
struct Sampler {
    items: Vec<usize>,
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
}

impl Sampler {
    fn new(items: Vec<usize>, batch: usize, seed: u64) -> Self {
        let mut s = Self {
            order: Vec::new(),
            pos: 0,
            batch: batch.min(items.len()).max(1),
            items,
            seed,
            epoch: 0,
        };
        s.shuffle();
        s
    }

    fn shuffle(&mut self) {
        self.order = self.items.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order.shuffle(&mut rng);
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.epoch += 1;
            self.pos = 0;
            self.shuffle();
        }
        let b = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        b
    }
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if n_classes < 2 {
        return Err(Error::Config("classification needs at least two classes".into()));
    }
    let first = *labels
        .first()
        .ok_or_else(|| Error::Config("training set is empty".into()))?;
    if labels.iter().all(|&l| l == first) {
        return Err(Error::Config(format!("training set holds only class {first}")));
    }
    Ok(())
}

fn rows_of(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * t.last_dim());
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    Tensor::new(vec![idx.len(), t.last_dim()], data)
}

fn head_scores(head: &ParameterStore, features: &Tensor) -> Result<Tensor> {
    let mut sess = Session::new(head);
    let x = sess.graph.constant(features);
    let z = head_logits(&mut sess, x)?;
    Ok(sess.graph.tensor(z))
}

fn report_from_scores(protocol: Protocol, scores: &Tensor, labels: &[usize], n_classes: usize) -> Result<EvalReport> {
    let preds: Vec<usize> = (0..scores.rows())
        .map(|i| argmax(&scores.row(i).iter().map(|&v| f64::from(v)).collect::<Vec<_>>()))
        .collect();
    EvalReport::from_predictions(protocol, &preds, labels, n_classes, Some(scores))
}

/// Trains a linear head by cross-entropy on fixed features and reports on the
/// test features. Returns the report and the trained head.
pub fn linear_probe(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    n_classes: usize,
    cfg: &ProbeConfig,
) -> Result<(EvalReport, ParameterStore)> {
    check_labels(train_labels, n_classes)?;
    let mut head = ParameterStore::new();
    init_head(&mut head, train.last_dim(), n_classes, cfg.seed)?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut sampler = Sampler::new((0..train.rows()).collect(), cfg.batch_size, cfg.seed);
    for _ in 0..cfg.steps {
        let idx = sampler.next_batch();
        let x = rows_of(train, &idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
        let grads = {
            let mut sess = Session::new(&head);
            let xv = sess.graph.constant(&x);
            let z = head_logits(&mut sess, xv)?;
            let l = sess.graph.cross_entropy(z, &y)?;
            sess.graph.backward(l)?;
            sess.grads()
        };
        opt.step(&mut head, &grads, cfg.lr)?;
    }
    let scores = head_scores(&head, test)?;
    Ok((report_from_scores(Protocol::LinearProbe, &scores, test_labels, n_classes)?, head))
}

fn split_arrays(data: &Dataset, idx: &[usize]) -> (Vec<Tensor>, Vec<usize>) {
    (
        idx.iter().map(|&i| data.samples[i].image.clone()).collect(),
        idx.iter().map(|&i| data.samples[i].label).collect(),
    )
}

/// Linear probe on pooled vision-tower features of the frozen model.
pub fn linear_probe_model(
    model: &ClipModel,
    store: &ParameterStore,
    data: &Dataset,
    train_idx: &[usize],
    cfg: &ProbeConfig,
) -> Result<EvalReport> {
    let (train_images, train_labels) = split_arrays(data, train_idx);
    let (test_images, test_labels) = split_arrays(data, &data.split_indices(Split::Test));
    let train = model.vision_hidden(store, &train_images, 64)?;
    let test = model.vision_hidden(store, &test_images, 64)?;
    linear_probe(&train, &train_labels, &test, &test_labels, data.n_classes(), cfg).map(|(r, _)| r)
}

/// End-to-end fine-tuning of the vision tower plus a linear head on the pooled
/// features. The text tower takes no part. Returns the report and the tuned
/// parameters (including the head).
pub fn full_finetune(
    model: &ClipModel,
    store: &ParameterStore,
    data: &Dataset,
    train_idx: &[usize],
    cfg: &FinetuneConfig,
) -> Result<(EvalReport, ParameterStore)> {
    let n_classes = data.n_classes();
    let (train_images, train_labels) = split_arrays(data, train_idx);
    check_labels(&train_labels, n_classes)?;
    let mut tuned = store.clone();
    init_head(&mut tuned, model.cfg.vision.d_model, n_classes, cfg.seed)?;
    FreezePolicy::finetune().apply(&mut tuned)?;
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut sampler = Sampler::new((0..train_images.len()).collect(), cfg.batch_size, cfg.seed);
    for _ in 0..cfg.steps {
        let idx = sampler.next_batch();
        let images: Vec<Tensor> = idx.iter().map(|&i| train_images[i].clone()).collect();
        let y: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
        let grads = {
            let mut sess = Session::new(&tuned);
            let h = model.vision.encode(&mut sess, &images)?;
            let z = head_logits(&mut sess, h)?;
            let l = sess.graph.cross_entropy(z, &y)?;
            sess.graph.backward(l)?;
            sess.grads()
        };
        opt.step(&mut tuned, &grads, cfg.lr)?;
    }
    let (test_images, test_labels) = split_arrays(data, &data.split_indices(Split::Test));
    let feats = model.vision_hidden(&tuned, &test_images, 64)?;
    let scores = head_scores(&tuned, &feats)?;
    Ok((report_from_scores(Protocol::FineTune, &scores, &test_labels, n_classes)?, tuned))
}

/// Class-stratified subset of the training split: `ceil(ratio * n_c)` samples
/// per class (at least one), chosen by `seed`.
pub fn stratified_subset(data: &Dataset, ratio: f64, seed: u64) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("data ratio must lie in (0, 1], got {ratio}")));
    }
    let train = data.split_indices(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..data.n_classes() {
        let mut members: Vec<usize> = train.iter().copied().filter(|&i| data.samples[i].label == c).collect();
        members.shuffle(&mut rng);
        let k = ((ratio * members.len() as f64).ceil() as usize).clamp(1, members.len().max(1));
        out.extend(members.into_iter().take(k));
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub ratio: f64,
    pub reports: Vec<EvalReport>,
    pub median_accuracy: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Runs `protocol` (LP or FT) on stratified training subsets for each ratio
/// and seed.
pub fn data_ratio_sweep(
    model: &ClipModel,
    store: &ParameterStore,
    data: &Dataset,
    protocol: Protocol,
    ratios: &[f64],
    seeds: &[u64],
    cfg: &ProbeConfig,
) -> Result<Vec<RatioPoint>> {
    ratios
        .iter()
        .map(|&ratio| {
            let reports = seeds
                .iter()
                .map(|&seed| {
                    let idx = stratified_subset(data, ratio, seed)?;
                    let c = ProbeConfig { seed, ..*cfg };
                    match protocol {
                        Protocol::LinearProbe => linear_probe_model(model, store, data, &idx, &c),
                        Protocol::FineTune => full_finetune(model, store, data, &idx, &c).map(|(r, _)| r),
                        Protocol::ZeroShot => {
                            Err(Error::Config("zero-shot has no training data to subsample".into()))
                        }
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let accs: Vec<f64> = reports.iter().map(|r| r.accuracy).collect();
            Ok(RatioPoint {
                ratio,
                median_accuracy: median(&accs),
                reports,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub name: String,
    pub numerator: f64,
    pub denominator: f64,
    pub ratio: f64,
}

impl RatioRow {
    pub fn new(name: impl Into<String>, numerator: f64, denominator: f64) -> Result<Self> {
        let name = name.into();
        if denominator == 0.0 {
            return Err(Error::Config(format!("ratio {name:?} has a zero denominator")));
        }
        Ok(Self {
            name,
            numerator,
            denominator,
            ratio: numerator / denominator,
        })
    }

    pub fn reduction(&self) -> f64 {
        1.0 - self.ratio
    }
}

/// Formats `x` with three significant digits.
pub fn sig3(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let digits = (2 - x.abs().log10().floor() as i32).max(0) as usize;
    format!("{x:.digits$}")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub rows: Vec<RatioRow>,
}

impl RatioReport {
    pub fn get(&self, name: &str) -> Option<&RatioRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for RatioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name,numerator,denominator,ratio,reduction")?;
        for r in &self.rows {
            writeln!(
                f,
                "{},{},{},{}%,{}%",
                r.name,
                sig3(r.numerator),
                sig3(r.denominator),
                sig3(100.0 * r.ratio),
                sig3(100.0 * r.reduction())
            )?;
        }
        Ok(())
    }
}

/// Published trainable-parameter sizes in millions: adapter-tuned model vs a
/// fully trained ViT plus BERT baseline.
pub const PUBLISHED_OURS_TOTAL_M: f64 = 93.70;
pub const PUBLISHED_BASELINE_TOTAL_M: f64 = 153.59;
pub const PUBLISHED_OURS_LM_M: f64 = 3.27;
pub const PUBLISHED_BASELINE_LM_M: f64 = 83.05;

/// Ratios of trainable parameters, ours over baseline, for the whole model and
/// for the language model alone.
pub fn param_ratio_report(ours: &ParamCounts, baseline: &ParamCounts) -> Result<RatioReport> {
    Ok(RatioReport {
        rows: vec![
            RatioRow::new("total_trainable", ours.total as f64, baseline.total as f64)?,
            RatioRow::new(
                "language_model_trainable",
                ours.language_model() as f64,
                baseline.language_model() as f64,
            )?,
        ],
    })
}

/// The ratio rows computed from the published sizes.
pub fn published_ratio_report() -> Result<RatioReport> {
    Ok(RatioReport {
        rows: vec![
            RatioRow::new("published_total_trainable_M", PUBLISHED_OURS_TOTAL_M, PUBLISHED_BASELINE_TOTAL_M)?,
            RatioRow::new("published_language_model_trainable_M", PUBLISHED_OURS_LM_M, PUBLISHED_BASELINE_LM_M)?,
        ],
    })
}

/// Trainable counts of `store` after applying `policy` to a copy.
pub fn trainable_counts(store: &ParameterStore, policy: &FreezePolicy) -> Result<ParamCounts> {
    let mut s = store.clone();
    policy.apply(&mut s)?;
    Ok(count_params(&s, CountFilter::TrainableOnly))
}

#[cfg(test)]
mod tests;
