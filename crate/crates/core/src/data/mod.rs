//! Tokenizer, manifest and dataset I/O, the synthetic paired corpus and batch
//! iteration.
//!
//! On disk a dataset directory holds `manifest.csv`
//! (`image_path,caption,class_label,split`), `vocab.tsv`, `prompts.tsv` and
//! one CLFT1 tensor per image under `images/`.

mod synth;
mod vocab;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{class_template, generate, SynthSpec, PROMPT_PREFIX};
pub use vocab::{normalize, Vocab, BOS, EOS, PAD};

use crate::encoders::TokenSequence;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::prompt_tuning::HandcraftedPromptSet;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const PROMPTS_FILE: &str = "prompts.tsv";
pub const IMAGE_DIR: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::format("manifest", format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_path: String,
    pub caption: String,
    pub class_label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub image: Tensor,
    pub caption: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub prompts: HandcraftedPromptSet,
    pub vocab: Vocab,
}

fn image_path(id: usize) -> String {
    format!("{IMAGE_DIR}/{id:05}.clft")
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::format("manifest", e.to_string()))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let want = ["image_path", "caption", "class_label", "split"];
    let headers = r
        .headers()
        .map_err(|e| Error::format("manifest", e.to_string()))?;
    if headers.iter().ne(want) {
        return Err(Error::format(
            "manifest",
            format!("header must be {}", want.join(",")),
        ));
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| Error::format("manifest", format!("row {}: {e}", i + 1)))
        })
        .collect()
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.prompts.len()
    }

    /// Positions (into `samples`) of the given split, in id order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].split == split)
            .collect()
    }

    pub fn manifest(&self) -> Vec<ManifestRow> {
        self.samples
            .iter()
            .map(|s| ManifestRow {
                image_path: image_path(s.id),
                caption: s.caption.clone(),
                class_label: s.label,
                split: s.split,
            })
            .collect()
    }

    /// Maps every pixel `x` to `(x - mean) / std`.
    pub fn normalize_images(&mut self, mean: f32, std: f32) -> Result<()> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(Error::Config(format!("normalisation needs finite mean and std > 0, got {mean}, {std}")));
        }
        for s in &mut self.samples {
            s.image.data_mut().iter_mut().for_each(|x| *x = (*x - mean) / std);
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let images = dir.join(IMAGE_DIR);
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        for s in &self.samples {
            s.image.save(&dir.join(image_path(s.id)))?;
        }
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        self.prompts.save(&dir.join(PROMPTS_FILE))?;
        // Manifest last: its presence marks a complete dataset.
        write_manifest(&dir.join(MANIFEST_FILE), &self.manifest())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let rows = read_manifest(&dir.join(MANIFEST_FILE))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let prompts = HandcraftedPromptSet::load(&dir.join(PROMPTS_FILE))?;
        let mut samples = Vec::with_capacity(rows.len());
        for (id, row) in rows.into_iter().enumerate() {
            if row.class_label >= prompts.len() {
                return Err(Error::format(
                    "manifest",
                    format!("row {}: label {} has no prompt", id + 1, row.class_label),
                ));
            }
            let image = Tensor::load(&dir.join(&row.image_path))?;
            samples.push(Sample {
                id,
                image,
                caption: row.caption,
                label: row.class_label,
                split: row.split,
            });
        }
        Ok(Self {
            samples,
            prompts,
            vocab,
        })
    }
}

/// Aligned images, captions and labels; `texts[i]` describes `images[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub sample_ids: Vec<usize>,
    pub images: Vec<Tensor>,
    pub texts: Vec<TokenSequence>,
    pub labels: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Endless, reshuffled every epoch, short final batch dropped.
    Train,
    /// One pass in sample order, short final batch kept.
    Eval,
}

/// Batches over one split of a [`Dataset`].
pub struct BatchIter<'d> {
    data: &'d Dataset,
    indices: Vec<usize>,
    order: Vec<usize>,
    batch_size: usize,
    max_len: usize,
    seed: u64,
    mode: BatchMode,
    epoch: u64,
    pos: usize,
}

pub fn load_batches(
    data: &Dataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    mode: BatchMode,
    max_len: usize,
) -> Result<BatchIter<'_>> {
    let indices = data.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Config(format!("split {split} is empty")));
    }
    if batch_size == 0 || (mode == BatchMode::Train && batch_size < 2) {
        return Err(Error::Config(format!(
            "training batch size must be >= 2, got {batch_size}"
        )));
    }
    if mode == BatchMode::Train && batch_size > indices.len() {
        return Err(Error::Config(format!(
            "batch size {batch_size} exceeds split {split} size {}",
            indices.len()
        )));
    }
    let mut it = BatchIter {
        data,
        order: indices.clone(),
        indices,
        batch_size,
        max_len,
        seed,
        mode,
        epoch: 0,
        pos: 0,
    };
    it.reshuffle();
    Ok(it)
}

impl BatchIter<'_> {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn reshuffle(&mut self) {
        if self.mode == BatchMode::Train {
            self.order = self.indices.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(self.epoch);
            self.order.shuffle(&mut rng);
        }
    }

    /// Sample positions of the next batch.
    pub fn next_indices(&mut self) -> Option<Vec<usize>> {
        let remaining = self.order.len() - self.pos;
        if self.mode == BatchMode::Train && remaining < self.batch_size {
            self.epoch += 1;
            self.pos = 0;
            debug!("batch iterator wrapped to epoch {}", self.epoch);
            self.reshuffle();
        } else if remaining == 0 {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(idx)
    }

    pub fn make_batch(&self, idx: &[usize]) -> Result<PairBatch> {
        let mut b = PairBatch {
            sample_ids: Vec::with_capacity(idx.len()),
            images: Vec::with_capacity(idx.len()),
            texts: Vec::with_capacity(idx.len()),
            labels: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            let s = &self.data.samples[i];
            b.sample_ids.push(s.id);
            b.images.push(s.image.clone());
            b.texts.push(self.data.vocab.tokenize(&s.caption, self.max_len)?);
            b.labels.push(s.label);
        }
        Ok(b)
    }
}

impl Iterator for BatchIter<'_> {
    type Item = Result<PairBatch>;

    fn next(&mut self) -> Option<Self::Item> {
        let idx = self.next_indices()?;
        Some(self.make_batch(&idx))
    }
}
