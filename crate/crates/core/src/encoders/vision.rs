use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{Block, Norm};
use crate::autograd::{AttentionGeometry, Var};
use crate::error::{Error, Result};
use crate::params::{ComponentTag, ParameterStore, Session};
use crate::peft::{AdapterConfig, Linear, INIT_STD};
use crate::tensor::Tensor;

fn default_channels() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisionEncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    #[serde(default)]
    pub final_layer_norm: bool,
}

impl VisionEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("vision encoder: {m}")));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.channels == 0 || self.n_layers == 0 {
            return bad("channels and n_layers must be positive".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Splits an `[H, W, C]` image into row-major non-overlapping patches,
/// `[num_patches, patch * patch * C]` with features ordered `(dy, dx, c)`.
pub fn patchify(img: &Tensor, cfg: &VisionEncoderConfig) -> Result<Tensor> {
    let (s, p, c) = (cfg.image_size, cfg.patch_size, cfg.channels);
    if img.shape() != [s, s, c] {
        return Err(Error::Dimension {
            op: "patchify",
            lhs: img.shape().to_vec(),
            rhs: vec![s, s, c],
        });
    }
    let g = s / p;
    let src = img.data();
    let mut out = Vec::with_capacity(src.len());
    for pi in 0..g {
        for pj in 0..g {
            for dy in 0..p {
                let row = (pi * p + dy) * s;
                let start = (row + pj * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![g * g, p * p * c], out)
}

/// Bidirectional patch transformer with mean-token pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub cfg: VisionEncoderConfig,
    pub patch_embed: Linear,
    pub blocks: Vec<Block>,
    pub final_ln: Option<Norm>,
}

impl VisionEncoder {
    pub const POSITION_EMBEDDING: &'static str = "vision.position_embedding";

    pub fn build<R: Rng>(store: &mut ParameterStore, rng: &mut R, cfg: &VisionEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let tag = ComponentTag::Vision;
        let patch_embed = Linear::register(store, rng, "vision.patch_embed", cfg.patch_dim(), d, true, tag)?;
        store.insert_normal(rng, Self::POSITION_EMBEDDING, &[cfg.num_patches(), d], INIT_STD, tag)?;
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                Block::register(
                    store,
                    rng,
                    &format!("vision.layers.{i}"),
                    d,
                    cfg.n_heads,
                    tag,
                    &AdapterConfig::None,
                )
            })
            .collect::<Result<_>>()?;
        let final_ln = if cfg.final_layer_norm {
            Some(Norm::register(store, "vision.final_ln", d, tag)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            blocks,
            final_ln,
        })
    }

    /// Per-patch output tokens, `[batch * num_patches, d]`.
    pub fn tokens(&self, sess: &mut Session, images: &[Tensor]) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::Contract("empty image batch".into()));
        }
        let n = self.cfg.num_patches();
        let mut data = Vec::with_capacity(images.len() * n * self.cfg.patch_dim());
        for img in images {
            data.extend(patchify(img, &self.cfg)?.into_data());
        }
        let patches = Tensor::new(vec![images.len() * n, self.cfg.patch_dim()], data)?;
        let x = sess.graph.constant(&patches);
        let x = self.patch_embed.forward(sess, x)?;
        let pos = sess.param(Self::POSITION_EMBEDDING)?;
        let pos = sess.graph.tile_rows(pos, images.len())?;
        let mut x = sess.graph.add(x, pos)?;
        let geom = AttentionGeometry {
            batch: images.len(),
            seq: n,
            heads: self.cfg.n_heads,
            causal: false,
            key_valid: None,
        };
        for block in &self.blocks {
            x = block.forward(sess, x, &geom)?;
        }
        match &self.final_ln {
            Some(ln) => ln.forward(sess, x),
            None => Ok(x),
        }
    }

    /// Mean over patch tokens, `[batch, d]`.
    pub fn encode(&self, sess: &mut Session, images: &[Tensor]) -> Result<Var> {
        let x = self.tokens(sess, images)?;
        sess.graph.mean_groups(x, self.cfg.num_patches())
    }
}
