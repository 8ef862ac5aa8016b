//! Optimisers, the learning-rate schedule and the stage-1 contrastive
//! pretraining loop with best-validation checkpoint selection.

mod optim;
mod schedule;

pub use optim::{AdamW, AdamWConfig, Grads, Optimizer, Sgd, SgdConfig};
pub use schedule::{lr_at, ScheduleConfig};

use std::io::Write;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{load_batches, BatchMode, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ClipModel;
use crate::objectives::{Denominator, Temperature};
use crate::params::{ParameterStore, Session};
use crate::tensor::Tensor;

/// One line of the metrics CSV: `step,split,loss,lr,tau,acc`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub lr: f64,
    pub tau: f64,
    pub acc: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,split,loss,lr,tau,acc";

impl MetricRow {
    pub fn to_csv_line(&self) -> String {
        let acc = self.acc.map(|a| format!("{a:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.6e},{:.6},{}",
            self.step, self.split, self.loss, self.lr, self.tau, acc
        )
    }
}

/// Serialises rows under [`METRICS_HEADER`].
pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.to_csv_line())?;
    }
    Ok(())
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format("metrics", format!("header must be {METRICS_HEADER}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::format("metrics", format!("row {}: {line:?}", i + 1));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(MetricRow {
                step: f[0].parse().map_err(|_| bad())?,
                split: f[1].to_string(),
                loss: num(f[2])?,
                lr: num(f[3])?,
                tau: num(f[4])?,
                acc: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            })
        })
        .collect()
}

/// Fraction of rows whose largest similarity is on the diagonal.
pub fn in_batch_accuracy(img: &Tensor, txt: &Tensor) -> f64 {
    let n = img.rows();
    let hits = (0..n)
        .filter(|&i| {
            let s: Vec<f64> = (0..n)
                .map(|j| img.row(i).iter().zip(txt.row(j)).map(|(a, b)| f64::from(a * b)).sum())
                .collect();
            crate::objectives::argmax(&s) == i
        })
        .count();
    hits as f64 / n as f64
}

/// Scores the current parameters; lower is better.
pub trait Validator {
    fn validate(&mut self, model: &ClipModel, store: &ParameterStore) -> Result<ValidationResult>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationResult {
    pub loss: f64,
    pub acc: Option<f64>,
}

/// Mean contrastive loss over the validation split in fixed order. Final
/// batches of fewer than two pairs are skipped.
pub struct ContrastiveValidator<'d> {
    pub data: &'d Dataset,
    pub batch_size: usize,
    pub max_len: usize,
    pub denominator: Denominator,
}

impl Validator for ContrastiveValidator<'_> {
    fn validate(&mut self, model: &ClipModel, store: &ParameterStore) -> Result<ValidationResult> {
        let batches = load_batches(self.data, Split::Val, self.batch_size, 0, BatchMode::Eval, self.max_len)?;
        let (mut loss, mut acc, mut n) = (0.0, 0.0, 0usize);
        for b in batches {
            let b = b?;
            if b.len() < 2 {
                continue;
            }
            let mut sess = Session::new(store);
            let img = model.image_features(&mut sess, &b.images)?;
            let txt = model.text_features(&mut sess, &b.texts)?;
            let l = crate::objectives::info_nce_session(&mut sess, img, txt, self.denominator)?;
            loss += sess.graph.scalar(l.total) * b.len() as f64;
            acc += in_batch_accuracy(&sess.graph.tensor(img), &sess.graph.tensor(txt)) * b.len() as f64;
            n += b.len();
        }
        if n == 0 {
            return Err(Error::Config("validation split has no batch of >= 2 pairs".into()));
        }
        Ok(ValidationResult {
            loss: loss / n as f64,
            acc: Some(acc / n as f64),
        })
    }
}

/// Replays a fixed sequence of validation losses.
pub struct ScriptedValidator {
    pub losses: Vec<f64>,
    pub calls: usize,
}

impl Validator for ScriptedValidator {
    fn validate(&mut self, _: &ClipModel, _: &ParameterStore) -> Result<ValidationResult> {
        let loss = *self
            .losses
            .get(self.calls)
            .ok_or_else(|| Error::Contract("scripted validator exhausted".into()))?;
        self.calls += 1;
        Ok(ValidationResult { loss, acc: None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub schedule: ScheduleConfig,
    pub adamw: AdamWConfig,
    pub batch_size: usize,
    pub eval_interval: usize,
    pub denominator: Denominator,
    pub seed: u64,
    pub max_len: usize,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    /// Parameters at the lowest validation loss (initial values when no
    /// evaluation ran).
    pub best: ParameterStore,
    pub best_step: usize,
    pub best_val_loss: Option<f64>,
    pub metrics: Vec<MetricRow>,
}

/// Stage-1 loop. `store` ends holding the last-step parameters.
pub fn pretrain_loop(
    model: &ClipModel,
    store: &mut ParameterStore,
    data: &Dataset,
    cfg: &PretrainConfig,
    validator: &mut dyn Validator,
    mut on_metric: impl FnMut(&MetricRow),
) -> Result<PretrainOutcome> {
    cfg.schedule.validate()?;
    if cfg.eval_interval == 0 {
        return Err(Error::Config("eval_interval must be positive".into()));
    }
    let mut batches = load_batches(data, Split::Train, cfg.batch_size, cfg.seed, BatchMode::Train, cfg.max_len)?;
    let mut opt = AdamW::new(cfg.adamw);
    let mut outcome = PretrainOutcome {
        best: store.clone(),
        best_step: 0,
        best_val_loss: None,
        metrics: Vec::new(),
    };
    let total = cfg.schedule.total_steps;
    for step in 1..=total {
        let lr = lr_at(step, &cfg.schedule);
        let batch = batches.next().ok_or_else(|| Error::Contract("training iterator ended".into()))??;
        let (loss, acc, grads) = {
            let mut sess = Session::new(store);
            let img = model.image_features(&mut sess, &batch.images)?;
            let txt = model.text_features(&mut sess, &batch.texts)?;
            let l = crate::objectives::info_nce_session(&mut sess, img, txt, cfg.denominator)?;
            let loss = sess.graph.scalar(l.total);
            if !loss.is_finite() {
                return Err(Error::NonFiniteGradient(format!("loss at step {step} is {loss}")));
            }
            let acc = in_batch_accuracy(&sess.graph.tensor(img), &sess.graph.tensor(txt));
            sess.graph.backward(l.total)?;
            (loss, acc, sess.grads())
        };
        opt.step(store, &grads, lr)?;
        Temperature::clamp_in_store(store)?;
        let tau = f64::from(Temperature::read(store)?.tau());
        let row = MetricRow {
            step,
            split: "train".into(),
            loss,
            lr,
            tau,
            acc: Some(acc),
        };
        on_metric(&row);
        outcome.metrics.push(row);
        if step % cfg.eval_interval == 0 || step == total {
            let v = validator.validate(model, store)?;
            info!("step {step}: train loss {loss:.4}, val loss {:.4}", v.loss);
            let row = MetricRow {
                step,
                split: "val".into(),
                loss: v.loss,
                lr,
                tau,
                acc: v.acc,
            };
            on_metric(&row);
            outcome.metrics.push(row);
            if outcome.best_val_loss.is_none_or(|b| v.loss < b) {
                outcome.best_val_loss = Some(v.loss);
                outcome.best_step = step;
                outcome.best = store.clone();
            }
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests;
