//! Symmetric image-text contrastive loss with a learnable temperature.
//!
//! `S[i][j] = I_i . T_j`. The image-to-text term is the mean over rows of
//! `logsumexp_j(S[i][j] / tau) - S[i][i] / tau`; the text-to-image term is the
//! same on `S^T`; the total is their average. The inclusive denominator sums
//! over every `j`, the exclusive one skips `j = i` and is unbounded below.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ComponentTag, ParameterStore, Session};
use crate::tensor::Tensor;

pub const TAU_INIT: f32 = 0.07;
pub const TAU_MIN: f32 = 1e-3;
pub const TAU_MAX: f32 = 100.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    #[default]
    Inclusive,
    Exclusive,
}

/// `tau = exp(log_tau)`, so `tau > 0` by construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature {
    pub log_tau: f32,
}

impl Temperature {
    /// Store entry holding `log_tau` as a one-element tensor.
    pub const PARAM: &'static str = "logit.log_tau";

    pub fn from_tau(tau: f32) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Config(format!("temperature must be positive and finite, got {tau}")));
        }
        Ok(Self { log_tau: tau.ln() })
    }

    pub fn tau(self) -> f32 {
        self.log_tau.exp()
    }

    pub fn clamped(self) -> Self {
        Self {
            log_tau: self.log_tau.clamp(TAU_MIN.ln(), TAU_MAX.ln()),
        }
    }

    pub fn register(self, store: &mut ParameterStore) -> Result<()> {
        store.insert(Self::PARAM, Tensor::scalar(self.log_tau), ComponentTag::Projection)
    }

    pub fn read(store: &ParameterStore) -> Result<Self> {
        Ok(Self {
            log_tau: store.tensor(Self::PARAM)?.data()[0],
        })
    }

    /// Clamps the stored value so that `tau` stays in `[TAU_MIN, TAU_MAX]`.
    pub fn clamp_in_store(store: &mut ParameterStore) -> Result<()> {
        let t = Self::read(store)?.clamped();
        let p = store.get_mut(Self::PARAM)?;
        p.value.data_mut()[0] = t.log_tau;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub total: f64,
}

/// Loss nodes produced by [`info_nce_graph`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_i2t: Var,
    pub l_t2i: Var,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph) -> LossBreakdown {
        LossBreakdown {
            l_i2t: g.scalar(self.l_i2t),
            l_t2i: g.scalar(self.l_t2i),
            total: g.scalar(self.total),
        }
    }
}

/// Contrastive loss over `[N, d]` image and text embedding nodes; `log_tau`
/// is a one-element node.
pub fn info_nce_graph(g: &mut Graph, img: Var, txt: Var, log_tau: Var, denom: Denominator) -> Result<LossVars> {
    let (ni, nt) = (g.shape(img)[0], g.shape(txt)[0]);
    if ni != nt || g.shape(img) != g.shape(txt) {
        return Err(Error::Dimension {
            op: "info_nce",
            lhs: g.shape(img).to_vec(),
            rhs: g.shape(txt).to_vec(),
        });
    }
    if ni < 2 {
        return Err(Error::Contract(format!("contrastive loss needs N >= 2, got {ni}")));
    }
    let exclude = denom == Denominator::Exclusive;
    let tt = g.transpose(txt)?;
    let s = g.matmul(img, tt)?;
    let neg = g.scale(log_tau, -1.0);
    let inv_tau = g.exp(neg);
    let logits = g.mul_scalar(s, inv_tau)?;
    let diag = g.diagonal(logits)?;
    let lse_rows = g.logsumexp_rows(logits, exclude)?;
    let r = g.sub(lse_rows, diag)?;
    let l_i2t = g.mean(r);
    let logits_t = g.transpose(logits)?;
    let lse_cols = g.logsumexp_rows(logits_t, exclude)?;
    let c = g.sub(lse_cols, diag)?;
    let l_t2i = g.mean(c);
    let sum = g.add(l_i2t, l_t2i)?;
    let total = g.scale(sum, 0.5);
    Ok(LossVars { l_i2t, l_t2i, total })
}

/// Evaluates the loss on fixed embeddings (rows of `img` and `txt`).
pub fn info_nce_symmetric(img: &Tensor, txt: &Tensor, temp: Temperature, denom: Denominator) -> Result<LossBreakdown> {
    let mut g = Graph::new();
    let i = g.constant(img);
    let t = g.constant(txt);
    let lt = g.constant(&Tensor::scalar(temp.log_tau));
    Ok(info_nce_graph(&mut g, i, t, lt, denom)?.breakdown(&g))
}

/// Loss with the temperature taken from `sess`'s store.
pub fn info_nce_session(sess: &mut Session, img: Var, txt: Var, denom: Denominator) -> Result<LossVars> {
    let lt = sess.param(Temperature::PARAM)?;
    info_nce_graph(&mut sess.graph, img, txt, lt, denom)
}

/// `S[i][j] = dot(img_i, txt_j)`.
pub fn similarity_matrix(img: &Tensor, txt: &Tensor) -> Result<Tensor> {
    if img.shape().len() != 2 || img.shape() != txt.shape() {
        return Err(Error::Dimension {
            op: "similarity_matrix",
            lhs: img.shape().to_vec(),
            rhs: txt.shape().to_vec(),
        });
    }
    let n = img.rows();
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(dot(img.row(i), txt.row(j)) as f32);
        }
    }
    Tensor::new(vec![n, n], out)
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// `logits[c] = dot(img, class_c) / tau` for `[C, d]` class embeddings.
pub fn zero_shot_logits(img: &[f32], classes: &Tensor, tau: f32) -> Result<Vec<f64>> {
    if classes.shape().len() != 2 || classes.shape()[1] != img.len() {
        return Err(Error::Dimension {
            op: "zero_shot_logits",
            lhs: vec![img.len()],
            rhs: classes.shape().to_vec(),
        });
    }
    if classes.rows() < 2 {
        return Err(Error::Config("zero-shot classification needs at least 2 classes".into()));
    }
    let tau = f64::from(tau);
    Ok((0..classes.rows()).map(|c| dot(img, classes.row(c)) / tau).collect())
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
