use rand::Rng;
use serde::{Deserialize, Serialize};

use super::block::{Block, Norm};
use crate::autograd::{AttentionGeometry, Var};
use crate::error::{Error, Result};
use crate::params::{ComponentTag, ParameterStore, Session};
use crate::peft::{AdapterConfig, INIT_STD};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_seq_len: usize,
    pub eos_token_id: usize,
    pub pad_token_id: usize,
    /// Tags the positional table as an unlocked embedding instead of base weights.
    #[serde(default)]
    pub unlock_positional: bool,
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("text encoder: {m}")));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.eos_token_id == self.pad_token_id {
            return bad("eos_token_id must differ from pad_token_id".into());
        }
        if self.eos_token_id >= self.vocab_size || self.pad_token_id >= self.vocab_size {
            return bad(format!("special ids must be < vocab_size {}", self.vocab_size));
        }
        if self.max_seq_len == 0 || self.n_layers == 0 {
            return bad("max_seq_len and n_layers must be positive".into());
        }
        Ok(())
    }
}

/// Token ids with a guaranteed end-of-sequence marker; positions after the
/// first EOS are ignored.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
    first_eos: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, eos_token_id: usize) -> Result<Self> {
        let first_eos = ids
            .iter()
            .position(|&t| t == eos_token_id)
            .ok_or_else(|| Error::Contract(format!("token sequence {ids:?} has no EOS")))?;
        Ok(Self { ids, first_eos })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn first_eos(&self) -> usize {
        self.first_eos
    }

    /// Ids up to and including the first EOS.
    pub fn content(&self) -> &[usize] {
        &self.ids[..=self.first_eos]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Causal transformer with first-EOS pooling.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    pub blocks: Vec<Block>,
    pub final_ln: Norm,
}

impl TextEncoder {
    pub const TOKEN_EMBEDDING: &'static str = "text.token_embedding";
    pub const POSITION_EMBEDDING: &'static str = "text.position_embedding";

    pub fn build<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        cfg: &TextEncoderConfig,
        adapters: &AdapterConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        adapters.validate(cfg.d_model)?;
        let d = cfg.d_model;
        store.insert_normal(
            rng,
            Self::TOKEN_EMBEDDING,
            &[cfg.vocab_size, d],
            INIT_STD,
            ComponentTag::TextEmbedding,
        )?;
        let pos_tag = if cfg.unlock_positional {
            ComponentTag::TextEmbedding
        } else {
            ComponentTag::TextBase
        };
        store.insert_normal(rng, Self::POSITION_EMBEDDING, &[cfg.max_seq_len, d], INIT_STD, pos_tag)?;
        let blocks = (0..cfg.n_layers)
            .map(|i| {
                Block::register(
                    store,
                    rng,
                    &format!("text.layers.{i}"),
                    d,
                    cfg.n_heads,
                    ComponentTag::TextBase,
                    adapters,
                )
            })
            .collect::<Result<_>>()?;
        let final_ln = Norm::register(store, "text.final_ln", d, ComponentTag::TextBase)?;
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            final_ln,
        })
    }

    /// Embedding rows for `ids`, `[ids.len(), d]`.
    pub fn token_embeddings(&self, sess: &mut Session, ids: &[usize]) -> Result<Var> {
        let table = sess.param(Self::TOKEN_EMBEDDING)?;
        sess.graph.embedding_lookup(table, ids)
    }

    /// Final-layer hidden states for a padded batch of token-embedding inputs.
    ///
    /// `inputs[b]` is `[len_b, d]`; rows past `len_b` are zero-padded and
    /// masked as keys. Returns `[batch * seq, d]` and `seq = max len_b`.
    pub fn hidden_from_embeds(&self, sess: &mut Session, inputs: &[Var]) -> Result<(Var, usize)> {
        let d = self.cfg.d_model;
        if inputs.is_empty() {
            return Err(Error::Contract("empty text batch".into()));
        }
        let mut lens = Vec::with_capacity(inputs.len());
        for &x in inputs {
            let s = sess.graph.shape(x);
            if s.len() != 2 || s[1] != d || s[0] == 0 {
                return Err(Error::Dimension {
                    op: "text input embeddings",
                    lhs: s.to_vec(),
                    rhs: vec![self.cfg.max_seq_len, d],
                });
            }
            if s[0] > self.cfg.max_seq_len {
                return Err(Error::Contract(format!(
                    "sequence length {} exceeds max_seq_len {}",
                    s[0], self.cfg.max_seq_len
                )));
            }
            lens.push(s[0]);
        }
        let seq = *lens.iter().max().unwrap_or(&1);
        let pos = sess.param(Self::POSITION_EMBEDDING)?;
        let pos = sess.graph.gather_rows(pos, &(0..seq).collect::<Vec<_>>())?;
        let mut parts = Vec::with_capacity(inputs.len() * 2);
        let mut key_valid = Vec::with_capacity(inputs.len() * seq);
        for (&x, &len) in inputs.iter().zip(&lens) {
            parts.push(x);
            if len < seq {
                parts.push(sess.graph.constant(&Tensor::zeros(&[seq - len, d])));
            }
            key_valid.extend((0..seq).map(|t| t < len));
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            sess.graph.concat_rows(&parts)?
        };
        let pos = sess.graph.tile_rows(pos, inputs.len())?;
        let mut x = sess.graph.add(x, pos)?;
        let geom = AttentionGeometry {
            batch: inputs.len(),
            seq,
            heads: self.cfg.n_heads,
            causal: true,
            key_valid: if key_valid.iter().all(|&v| v) {
                None
            } else {
                Some(key_valid)
            },
        };
        for block in &self.blocks {
            x = block.forward(sess, x, &geom)?;
        }
        Ok((self.final_ln.forward(sess, x)?, seq))
    }

    /// Hidden states for token sequences truncated after their first EOS.
    pub fn hidden_states(&self, sess: &mut Session, seqs: &[TokenSequence]) -> Result<(Var, usize)> {
        let mut inputs = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.check_ids(s)?;
            inputs.push(self.token_embeddings(sess, s.content())?);
        }
        self.hidden_from_embeds(sess, &inputs)
    }

    /// Pooled `[batch, d]` text features at each sequence's first EOS.
    pub fn encode(&self, sess: &mut Session, seqs: &[TokenSequence]) -> Result<Var> {
        let (h, seq) = self.hidden_states(sess, seqs)?;
        let idx: Vec<usize> = seqs
            .iter()
            .enumerate()
            .map(|(b, s)| b * seq + s.first_eos())
            .collect();
        sess.graph.gather_rows(h, &idx)
    }

    /// Pooled features for embedding inputs, taken at each input's last row.
    pub fn encode_embeds(&self, sess: &mut Session, inputs: &[Var]) -> Result<Var> {
        let lens: Vec<usize> = inputs.iter().map(|&x| sess.graph.shape(x)[0]).collect();
        let (h, seq) = self.hidden_from_embeds(sess, inputs)?;
        let idx: Vec<usize> = lens
            .iter()
            .enumerate()
            .map(|(b, &len)| b * seq + len - 1)
            .collect();
        sess.graph.gather_rows(h, &idx)
    }

    fn check_ids(&self, s: &TokenSequence) -> Result<()> {
        if s.len() > self.cfg.max_seq_len {
            return Err(Error::Contract(format!(
                "sequence length {} exceeds max_seq_len {}",
                s.len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some(&bad) = s.ids().iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Index {
                what: "token id",
                index: bad,
                bound: self.cfg.vocab_size,
            });
        }
        Ok(())
    }
}
