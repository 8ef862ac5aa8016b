//! The assembled two-tower model: text and vision towers, projection heads
//! into the joint space and the contrastive temperature.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::PairBatch;
use crate::encoders::{project_var, TextEncoder, TextEncoderConfig, TokenSequence, VisionEncoder, VisionEncoderConfig};
use crate::error::{Error, Result};
use crate::objectives::{info_nce_session, Denominator, LossVars, Temperature};
use crate::params::{ComponentTag, ParameterStore, Session};
use crate::peft::{AdapterConfig, INIT_STD};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub vision: VisionEncoderConfig,
    pub adapter: AdapterConfig,
    pub d_joint: usize,
    pub tau_init: f32,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.vision.validate()?;
        self.adapter.validate(self.text.d_model)?;
        if self.d_joint == 0 {
            return Err(Error::Config("d_joint must be positive".into()));
        }
        Temperature::from_tau(self.tau_init).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipModel {
    pub cfg: ModelConfig,
    pub text: TextEncoder,
    pub vision: VisionEncoder,
}

impl ClipModel {
    pub const TEXT_HEAD: &'static str = "proj.text.weight";
    pub const VISION_HEAD: &'static str = "proj.vision.weight";

    /// Registers all parameters with their initial values. Every entry starts
    /// trainable; apply a [`crate::FreezePolicy`] before training.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParameterStore)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let text = TextEncoder::build(&mut store, &mut rng, &cfg.text, &cfg.adapter)?;
        let vision = VisionEncoder::build(&mut store, &mut rng, &cfg.vision)?;
        store.insert_normal(
            &mut rng,
            Self::TEXT_HEAD,
            &[cfg.text.d_model, cfg.d_joint],
            INIT_STD,
            ComponentTag::Projection,
        )?;
        store.insert_normal(
            &mut rng,
            Self::VISION_HEAD,
            &[cfg.vision.d_model, cfg.d_joint],
            INIT_STD,
            ComponentTag::Projection,
        )?;
        Temperature::from_tau(cfg.tau_init)?.register(&mut store)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                text,
                vision,
            },
            store,
        ))
    }

    /// Unit-norm `[batch, d_joint]` text features.
    pub fn text_features(&self, sess: &mut Session, seqs: &[TokenSequence]) -> Result<Var> {
        let h = self.text.encode(sess, seqs)?;
        project_var(sess, h, Self::TEXT_HEAD, true)
    }

    /// Unit-norm text features for embedding-level inputs pooled at their last row.
    pub fn text_features_from_embeds(&self, sess: &mut Session, inputs: &[Var]) -> Result<Var> {
        let h = self.text.encode_embeds(sess, inputs)?;
        project_var(sess, h, Self::TEXT_HEAD, true)
    }

    /// Unit-norm `[batch, d_joint]` image features.
    pub fn image_features(&self, sess: &mut Session, images: &[Tensor]) -> Result<Var> {
        let h = self.vision.encode(sess, images)?;
        project_var(sess, h, Self::VISION_HEAD, true)
    }

    pub fn contrastive_loss(&self, sess: &mut Session, batch: &PairBatch, denom: Denominator) -> Result<LossVars> {
        let img = self.image_features(sess, &batch.images)?;
        let txt = self.text_features(sess, &batch.texts)?;
        info_nce_session(sess, img, txt, denom)
    }

    /// Detached image features as a `[n, d_joint]` tensor, in chunks of `chunk`.
    pub fn embed_images(&self, store: &ParameterStore, images: &[Tensor], chunk: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(images.len() * self.cfg.d_joint);
        for part in images.chunks(chunk.max(1)) {
            let mut sess = Session::new(store);
            let f = self.image_features(&mut sess, part)?;
            data.extend(sess.graph.tensor(f).into_data());
        }
        Tensor::new(vec![images.len(), self.cfg.d_joint], data)
    }

    /// Detached pooled vision-tower features (before projection).
    pub fn vision_hidden(&self, store: &ParameterStore, images: &[Tensor], chunk: usize) -> Result<Tensor> {
        let d = self.cfg.vision.d_model;
        let mut data = Vec::with_capacity(images.len() * d);
        for part in images.chunks(chunk.max(1)) {
            let mut sess = Session::new(store);
            let f = self.vision.encode(&mut sess, part)?;
            data.extend(sess.graph.tensor(f).into_data());
        }
        Tensor::new(vec![images.len(), d], data)
    }

    /// Detached pooled text-tower features (before projection).
    pub fn text_hidden(&self, store: &ParameterStore, seqs: &[TokenSequence]) -> Result<Tensor> {
        let mut sess = Session::new(store);
        let h = self.text.encode(&mut sess, seqs)?;
        Ok(sess.graph.tensor(h))
    }

    pub fn embed_texts(&self, store: &ParameterStore, seqs: &[TokenSequence]) -> Result<Tensor> {
        let mut sess = Session::new(store);
        let f = self.text_features(&mut sess, seqs)?;
        Ok(sess.graph.tensor(f))
    }
}
