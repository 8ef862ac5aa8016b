use rand::Rng;

use crate::autograd::{AttentionGeometry, Var};
use crate::error::Result;
use crate::params::{ComponentTag, ParameterStore, Session};
use crate::peft::{self, AdaptedLinear, AdapterConfig, AttnTarget, Ia3Target, Linear};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Layer-norm gain (ones) and bias (zeros).
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: String,
    pub bias: String,
}

impl Norm {
    pub fn register(store: &mut ParameterStore, name: &str, d: usize, tag: ComponentTag) -> Result<Self> {
        let gain = format!("{name}.gain");
        let bias = format!("{name}.bias");
        store.insert(&gain, Tensor::ones(&[d]), tag)?;
        store.insert(&bias, Tensor::zeros(&[d]), tag)?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let g = sess.param(&self.gain)?;
        let b = sess.param(&self.bias)?;
        sess.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Pre-LN transformer block: `x + attn(ln1(x))`, then `x + ffn(ln2(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub heads: usize,
    pub ln1: Norm,
    pub q: AdaptedLinear,
    pub k: AdaptedLinear,
    pub v: AdaptedLinear,
    pub o: AdaptedLinear,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    /// IA3 scaling of the post-GELU hidden activation.
    pub ffn_scale: Option<String>,
    /// `[P, 2, d]` prefix key/value table.
    pub prefix: Option<String>,
}

impl Block {
    /// Registers one block under `name`, injecting `adapters` (which must be
    /// `None` for towers without adapters).
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        tag: ComponentTag,
        adapters: &AdapterConfig,
    ) -> Result<Self> {
        let hidden = 4 * d;
        let ln1 = Norm::register(store, &format!("{name}.ln1"), d, tag)?;
        let proj = |store: &mut ParameterStore, rng: &mut R, target: AttnTarget| -> Result<AdaptedLinear> {
            let pname = format!("{name}.attn.{}", target.as_str());
            let base = Linear::register(store, rng, &pname, d, d, true, tag)?;
            let mut layer = AdaptedLinear::plain(base);
            if let AdapterConfig::Lora { rank, alpha, targets } = adapters {
                if targets.contains(&target) {
                    layer = peft::inject_lora(store, rng, &pname, layer, *rank, *alpha)?;
                }
            }
            let ia3 = match target {
                AttnTarget::Q => Some(Ia3Target::Q),
                AttnTarget::K => Some(Ia3Target::K),
                AttnTarget::V => Some(Ia3Target::V),
                AttnTarget::O => None,
            };
            if let Some(t) = ia3 {
                if adapters.ia3_targets().contains(&t) {
                    layer.ia3 = Some(peft::inject_ia3(store, &pname, d)?);
                }
            }
            Ok(layer)
        };
        let q = proj(store, rng, AttnTarget::Q)?;
        let k = proj(store, rng, AttnTarget::K)?;
        let v = proj(store, rng, AttnTarget::V)?;
        let o = proj(store, rng, AttnTarget::O)?;
        let prefix = match adapters.prefix_length() {
            Some(p) => Some(peft::inject_prefix(store, rng, &format!("{name}.attn"), p, d)?),
            None => None,
        };
        let ln2 = Norm::register(store, &format!("{name}.ln2"), d, tag)?;
        let fc1 = Linear::register(store, rng, &format!("{name}.mlp.fc1"), d, hidden, true, tag)?;
        let fc2 = Linear::register(store, rng, &format!("{name}.mlp.fc2"), hidden, d, true, tag)?;
        let ffn_scale = if adapters.ia3_targets().contains(&Ia3Target::Ffn) {
            Some(peft::inject_ia3(store, &format!("{name}.mlp"), hidden)?)
        } else {
            None
        };
        Ok(Self {
            heads,
            ln1,
            q,
            k,
            v,
            o,
            ln2,
            fc1,
            fc2,
            ffn_scale,
            prefix,
        })
    }

    /// Attention sub-layer on already-normalised input, including the output
    /// projection.
    pub fn attend(&self, sess: &mut Session, x: Var, geom: &AttentionGeometry) -> Result<Var> {
        let q = self.q.forward(sess, x)?;
        let k = self.k.forward(sess, x)?;
        let v = self.v.forward(sess, x)?;
        let prefix = match &self.prefix {
            Some(name) => Some(peft::prefix_kv(sess, name)?),
            None => None,
        };
        let a = sess.graph.attention(q, k, v, prefix, geom)?;
        self.o.forward(sess, a)
    }

    /// Feed-forward sub-layer on already-normalised input.
    pub fn feed_forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(sess, x)?;
        let mut h = sess.graph.gelu(h);
        if let Some(l) = &self.ffn_scale {
            let l = sess.param(l)?;
            h = sess.graph.mul_bias(h, l)?;
        }
        self.fc2.forward(sess, h)
    }

    pub fn forward(&self, sess: &mut Session, x: Var, geom: &AttentionGeometry) -> Result<Var> {
        let n = self.ln1.forward(sess, x)?;
        let a = self.attend(sess, n, geom)?;
        let x = sess.graph.add(x, a)?;
        let n = self.ln2.forward(sess, x)?;
        let f = self.feed_forward(sess, n)?;
        sess.graph.add(x, f)
    }
}
