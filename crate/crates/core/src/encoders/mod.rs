//! Text and vision towers and the joint-space projection heads.
//!
//! The text tower is a pre-LN causal transformer pooled at the first EOS
//! token; the vision tower is a bidirectional patch transformer pooled by the
//! mean over patch tokens, without a final layer norm by default.

mod block;
mod text;
mod vision;

pub use block::{Block, Norm, LN_EPS};
pub use text::{TextEncoder, TextEncoderConfig, TokenSequence};
pub use vision::{patchify, VisionEncoder, VisionEncoderConfig};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::Session;
use crate::tensor::Tensor;

/// Rows with L2 norm below this map to the zero vector.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct JointEmbedding {
    pub vector: Vec<f32>,
    pub l2_normalized: bool,
}

impl JointEmbedding {
    /// Splits a `[batch, d]` node into per-row embeddings. A row counts as
    /// normalised when `normalized` is set and its norm is non-zero.
    pub fn rows(graph: &Graph, x: Var, normalized: bool) -> Vec<JointEmbedding> {
        let t = graph.tensor(x);
        (0..t.rows())
            .map(|r| {
                let vector = t.row(r).to_vec();
                let nonzero = vector.iter().any(|&v| v != 0.0);
                JointEmbedding {
                    vector,
                    l2_normalized: normalized && nonzero,
                }
            })
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.vector.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt()
    }
}

/// `hidden @ head`, L2-normalised per row when `normalize` is set.
pub fn project_var(sess: &mut Session, hidden: Var, head: &str, normalize: bool) -> Result<Var> {
    let w = sess.param(head)?;
    let y = sess.graph.matmul(hidden, w)?;
    Ok(if normalize {
        sess.graph.l2_normalize(y, NORM_EPS)
    } else {
        y
    })
}

/// Projects a single `[d_model]` hidden vector through a `[d_model, d_joint]` head.
pub fn project(hidden: &Tensor, head: &Tensor, normalize: bool) -> Result<JointEmbedding> {
    if head.shape().len() != 2 || hidden.numel() != head.shape()[0] {
        return Err(Error::Dimension {
            op: "project",
            lhs: hidden.shape().to_vec(),
            rhs: head.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let h = g.constant(&hidden.reshape(vec![1, hidden.numel()])?);
    let w = g.constant(head);
    let mut y = g.matmul(h, w)?;
    if normalize {
        y = g.l2_normalize(y, NORM_EPS);
    }
    Ok(JointEmbedding::rows(&g, y, normalize).remove(0))
}

#[cfg(test)]
mod tests;
