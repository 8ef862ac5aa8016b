//! Shared prompt-context tuning with both towers frozen.
//!
//! Every class prompt is `[context rows] ++ [class-name token embeddings] ++
//! [EOS embedding]`. The context rows are one `[L, d]` parameter shared by all
//! classes; the class-name suffix is what distinguishes the classes.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{load_batches, BatchMode, Dataset, Split, Vocab, EOS};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::ClipModel;
use crate::objectives::{argmax, Temperature};
use crate::params::{ComponentTag, ParameterStore, Session};
use crate::peft::FreezePolicy;
use crate::tensor::Tensor;
use crate::training::{lr_at, MetricRow, Optimizer, ScheduleConfig, Sgd, SgdConfig};

pub const CONTEXT_PARAM: &str = "prompt.context";
/// Half-width of the uniform init for context rows not covered by the caption.
pub const UNIFORM_INIT_BOUND: f32 = 0.05;

/// One handcrafted caption per class; class ids are `0..len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HandcraftedPromptSet {
    captions: Vec<String>,
}

impl HandcraftedPromptSet {
    pub fn new(captions: Vec<String>) -> Self {
        Self { captions }
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn caption(&self, class: usize) -> Result<&str> {
        self.captions
            .get(class)
            .map(String::as_str)
            .ok_or_else(|| Error::Index {
                what: "class id",
                index: class,
                bound: self.captions.len(),
            })
    }

    pub fn captions(&self) -> impl Iterator<Item = &String> {
        self.captions.iter()
    }

    /// Parses `class_id<TAB>caption` lines; ids must cover `0..n` exactly once.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String)> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (id, caption) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("prompts", format!("line {}: expected class_id<TAB>caption", n + 1)))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::format("prompts", format!("line {}: bad class id {id:?}", n + 1)))?;
            if caption.split_whitespace().next().is_none() {
                return Err(Error::format("prompts", format!("line {}: empty caption", n + 1)));
            }
            entries.push((id, caption.trim().to_string()));
        }
        entries.sort();
        for (i, (id, _)) in entries.iter().enumerate() {
            if *id != i {
                return Err(Error::format(
                    "prompts",
                    format!("class ids must be exactly 0..{} once each", entries.len()),
                ));
            }
        }
        Ok(Self::new(entries.into_iter().map(|(_, c)| c).collect()))
    }

    pub fn to_tsv(&self) -> String {
        self.captions
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{i}\t{c}\n"))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_tsv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Token-level split of the handcrafted prompts into a shared opening, used
/// to initialise the context, and per-class suffixes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptLayout {
    pub shared: Vec<usize>,
    pub suffixes: Vec<Vec<usize>>,
}

impl PromptLayout {
    /// The shared part is the longest common token prefix that leaves every
    /// suffix non-empty.
    pub fn from_prompts(prompts: &HandcraftedPromptSet, vocab: &Vocab) -> Result<Self> {
        if prompts.len() < 2 {
            return Err(Error::Config("prompt tuning needs at least 2 classes".into()));
        }
        let ids: Vec<Vec<usize>> = prompts
            .captions()
            .map(|c| vocab.encode_words(c))
            .collect::<Result<_>>()?;
        let min_len = ids.iter().map(Vec::len).min().unwrap_or(0);
        if min_len == 0 {
            return Err(Error::Contract("handcrafted prompt tokenizes to nothing".into()));
        }
        let mut k = 0;
        while k + 1 < min_len && ids.iter().all(|s| s[k] == ids[0][k]) {
            k += 1;
        }
        let suffixes: Vec<Vec<usize>> = ids.iter().map(|s| s[k..].to_vec()).collect();
        for i in 0..suffixes.len() {
            if suffixes[..i].contains(&suffixes[i]) {
                return Err(Error::Config(format!("class {i} has a duplicate prompt")));
            }
        }
        Ok(Self {
            shared: ids[0][..k].to_vec(),
            suffixes,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.suffixes.len()
    }
}

/// Context rows from a caption's token embeddings; rows beyond the caption
/// length are drawn from `U(-0.05, 0.05)` and placed first.
pub fn init_context<R: Rng>(caption_ids: &[usize], table: &Tensor, length: usize, rng: &mut R) -> Result<Tensor> {
    if caption_ids.is_empty() {
        return Err(Error::Contract("context init caption is empty".into()));
    }
    if length == 0 {
        return Err(Error::Config("context length must be >= 1".into()));
    }
    let d = table.last_dim();
    let m = caption_ids.len();
    if m > length {
        info!("context init truncates a {m}-token caption to {length} rows");
    }
    let mut data = Vec::with_capacity(length * d);
    let n_random = length.saturating_sub(m);
    for _ in 0..n_random * d {
        data.push(rng.random_range(-UNIFORM_INIT_BOUND..UNIFORM_INIT_BOUND));
    }
    for &id in &caption_ids[..m.min(length)] {
        if id >= table.rows() {
            return Err(Error::Index {
                what: "token id",
                index: id,
                bound: table.rows(),
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(vec![length, d], data)
}

/// Registers the `[length, d]` context parameter initialised from `layout`.
pub fn add_context(store: &mut ParameterStore, layout: &PromptLayout, length: usize, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = store.tensor(crate::encoders::TextEncoder::TOKEN_EMBEDDING)?.clone();
    let shared: Vec<usize> = if layout.shared.is_empty() {
        layout.suffixes[0].clone()
    } else {
        layout.shared.clone()
    };
    let ctx = init_context(&shared, &table, length, &mut rng)?;
    store.insert(CONTEXT_PARAM, ctx, ComponentTag::PromptContext)
}

/// Encodes class prompts through a frozen model.
#[derive(Clone, Debug)]
pub struct PromptEncoder<'m> {
    pub model: &'m ClipModel,
    pub layout: PromptLayout,
    /// Whether `prompt.context` precedes the suffix; without it the prompt
    /// reduces to the class name alone.
    pub use_context: bool,
}

impl<'m> PromptEncoder<'m> {
    pub fn new(model: &'m ClipModel, layout: PromptLayout, use_context: bool) -> Self {
        Self {
            model,
            layout,
            use_context,
        }
    }

    /// Unit-norm `[C, d_joint]` class embeddings.
    pub fn class_features(&self, sess: &mut Session) -> Result<Var> {
        let ctx = if self.use_context {
            Some(sess.param(CONTEXT_PARAM)?)
        } else {
            None
        };
        let max = self.model.cfg.text.max_seq_len;
        let mut inputs = Vec::with_capacity(self.layout.n_classes());
        for suffix in &self.layout.suffixes {
            let ids: Vec<usize> = suffix.iter().copied().chain([EOS]).collect();
            let ctx_len = ctx.map_or(0, |c| sess.graph.shape(c)[0]);
            if ctx_len + ids.len() > max {
                return Err(Error::Config(format!(
                    "prompt of {} context + {} suffix tokens exceeds max_seq_len {max}",
                    ctx_len,
                    ids.len()
                )));
            }
            let emb = self.model.text.token_embeddings(sess, &ids)?;
            inputs.push(match ctx {
                Some(c) => sess.graph.concat_rows(&[c, emb])?,
                None => emb,
            });
        }
        self.model.text_features_from_embeds(sess, &inputs)
    }

    /// Zero-shot cross-entropy of `images` against all class prompts.
    pub fn loss(&self, sess: &mut Session, images: &[Tensor], labels: &[usize]) -> Result<Var> {
        let c = self.layout.n_classes();
        if c < 2 {
            return Err(Error::Config("zero-shot loss needs at least 2 classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index {
                what: "class label",
                index: bad,
                bound: c,
            });
        }
        let cls = self.class_features(sess)?;
        let img = self.model.image_features(sess, images)?;
        let ct = sess.graph.transpose(cls)?;
        let s = sess.graph.matmul(img, ct)?;
        let lt = sess.param(Temperature::PARAM)?;
        let neg = sess.graph.scale(lt, -1.0);
        let inv = sess.graph.exp(neg);
        let logits = sess.graph.mul_scalar(s, inv)?;
        sess.graph.cross_entropy(logits, labels)
    }

    /// Detached class embeddings.
    pub fn class_embeddings(&self, store: &ParameterStore) -> Result<Tensor> {
        let mut sess = Session::new(store);
        let v = self.class_features(&mut sess)?;
        Ok(sess.graph.tensor(v))
    }
}

/// Class embeddings of the handcrafted prompts, encoded as ordinary text.
pub fn handcrafted_class_embeddings(
    model: &ClipModel,
    store: &ParameterStore,
    prompts: &HandcraftedPromptSet,
    vocab: &Vocab,
) -> Result<Tensor> {
    let seqs = prompts
        .captions()
        .map(|c| vocab.tokenize(c, model.cfg.text.max_seq_len))
        .collect::<Result<Vec<_>>>()?;
    model.embed_texts(store, &seqs)
}

/// Zero-shot accuracy of `images` against fixed class embeddings.
pub fn zero_shot_accuracy(
    model: &ClipModel,
    store: &ParameterStore,
    classes: &Tensor,
    images: &[Tensor],
    labels: &[usize],
) -> Result<f64> {
    let feats = model.embed_images(store, images, 64)?;
    let tau = Temperature::read(store)?.tau();
    let mut hits = 0;
    for (i, &l) in labels.iter().enumerate() {
        let logits = crate::objectives::zero_shot_logits(feats.row(i), classes, tau)?;
        hits += usize::from(argmax(&logits) == l);
    }
    Ok(hits as f64 / labels.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptTuneConfig {
    pub context_length: usize,
    pub schedule: ScheduleConfig,
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub seed: u64,
    /// Trains the temperature alongside the context.
    #[serde(default)]
    pub unfreeze_tau: bool,
}

#[derive(Clone, Debug)]
pub struct PromptTuneOutcome {
    pub metrics: Vec<MetricRow>,
    pub train_losses: Vec<f64>,
}

/// Adds the context (if absent), freezes everything else and trains the
/// context by zero-shot cross-entropy with SGD.
pub fn prompt_tune_loop(
    model: &ClipModel,
    store: &mut ParameterStore,
    data: &Dataset,
    cfg: &PromptTuneConfig,
    mut on_metric: impl FnMut(&MetricRow),
) -> Result<PromptTuneOutcome> {
    cfg.schedule.validate()?;
    if cfg.eval_interval == 0 {
        return Err(Error::Config("eval_interval must be positive".into()));
    }
    let layout = PromptLayout::from_prompts(&data.prompts, &data.vocab)?;
    if !store.contains(CONTEXT_PARAM) {
        add_context(store, &layout, cfg.context_length, cfg.seed)?;
    } else if store.tensor(CONTEXT_PARAM)?.rows() != cfg.context_length {
        return Err(Error::Config(format!(
            "stored context has {} rows, config asks for {}",
            store.tensor(CONTEXT_PARAM)?.rows(),
            cfg.context_length
        )));
    }
    FreezePolicy::stage2().apply(store)?;
    if cfg.unfreeze_tau {
        store.set_trainable(Temperature::PARAM, true)?;
    }
    let enc = PromptEncoder::new(model, layout, true);
    let max_len = model.cfg.text.max_seq_len;
    let mut batches = load_batches(data, Split::Train, cfg.batch_size, cfg.seed, BatchMode::Train, max_len)?;
    let val_idx = data.split_indices(Split::Val);
    let val_images: Vec<Tensor> = val_idx.iter().map(|&i| data.samples[i].image.clone()).collect();
    let val_labels: Vec<usize> = val_idx.iter().map(|&i| data.samples[i].label).collect();
    let mut opt = Sgd::new(cfg.sgd);
    let mut out = PromptTuneOutcome {
        metrics: Vec::new(),
        train_losses: Vec::new(),
    };
    let total = cfg.schedule.total_steps;
    for step in 1..=total {
        let lr = lr_at(step, &cfg.schedule);
        let batch = batches.next().ok_or_else(|| Error::Contract("training iterator ended".into()))??;
        let (loss, grads) = {
            let mut sess = Session::new(store);
            let l = enc.loss(&mut sess, &batch.images, &batch.labels)?;
            let loss = sess.graph.scalar(l);
            sess.graph.backward(l)?;
            (loss, sess.grads())
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteGradient(format!("prompt loss at step {step} is {loss}")));
        }
        opt.step(store, &grads, lr)?;
        Temperature::clamp_in_store(store)?;
        let tau = f64::from(Temperature::read(store)?.tau());
        out.train_losses.push(loss);
        let row = MetricRow {
            step,
            split: "train".into(),
            loss,
            lr,
            tau,
            acc: None,
        };
        on_metric(&row);
        out.metrics.push(row);
        if (step % cfg.eval_interval == 0 || step == total) && !val_images.is_empty() {
            let classes = enc.class_embeddings(store)?;
            let acc = zero_shot_accuracy(model, store, &classes, &val_images, &val_labels)?;
            let val_loss = {
                let mut sess = Session::new(store);
                let l = enc.loss(&mut sess, &val_images, &val_labels)?;
                sess.graph.scalar(l)
            };
            let row = MetricRow {
                step,
                split: "val".into(),
                loss: val_loss,
                lr,
                tau,
                acc: Some(acc),
            };
            on_metric(&row);
            out.metrics.push(row);
        }
    }
    Ok(out)
}
