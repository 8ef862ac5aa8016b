//! Parameter-efficient adapters for the frozen text encoder, freeze policies
//! and trainable-parameter accounting.
//!
//! Three adapter families are supported:
//!
//! * **LoRA** adds `(alpha / r) * (x A) B` to a frozen linear map. `B` starts
//!   at zero so an injected layer initially reproduces the base layer exactly.
//! * **IA3** multiplies key, value and/or FFN activations elementwise by a
//!   learned vector initialised to ones.
//! * **Prefix** prepends `P` learned key/value rows to every attention layer.
//!
//! Linear weights are stored `[d_in, d_out]` (`y = x W + b`), so LoRA's `A` is
//! stored `[d_in, r]` and `B` is `[r, d_out]`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::{ComponentTag, ParameterStore, Session};
use crate::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnTarget {
    Q,
    K,
    V,
    O,
}

impl AttnTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnTarget::Q => "q",
            AttnTarget::K => "k",
            AttnTarget::V => "v",
            AttnTarget::O => "o",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ia3Target {
    Q,
    K,
    V,
    Ffn,
}

impl Ia3Target {
    pub fn as_str(self) -> &'static str {
        match self {
            Ia3Target::Q => "q",
            Ia3Target::K => "k",
            Ia3Target::V => "v",
            Ia3Target::Ffn => "ffn",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum AdapterConfig {
    None,
    Lora {
        rank: usize,
        alpha: f32,
        targets: Vec<AttnTarget>,
    },
    Ia3 {
        targets: Vec<Ia3Target>,
        /// Permits scaling query activations as well.
        #[serde(default)]
        allow_query: bool,
    },
    Prefix {
        length: usize,
    },
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig::lora_default()
    }
}

impl AdapterConfig {
    /// `r = 8`, `alpha = 16` on `{q, v}`.
    pub fn lora_default() -> Self {
        AdapterConfig::Lora {
            rank: 8,
            alpha: 16.0,
            targets: vec![AttnTarget::Q, AttnTarget::V],
        }
    }

    pub fn ia3_default() -> Self {
        AdapterConfig::Ia3 {
            targets: vec![Ia3Target::K, Ia3Target::V, Ia3Target::Ffn],
            allow_query: false,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AdapterConfig::None => "none",
            AdapterConfig::Lora { .. } => "lora",
            AdapterConfig::Ia3 { .. } => "ia3",
            AdapterConfig::Prefix { .. } => "prefix",
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        match self {
            AdapterConfig::None => Ok(()),
            AdapterConfig::Lora {
                rank,
                alpha,
                targets,
            } => {
                if targets.is_empty() {
                    return Err(Error::Config("LoRA targets must be non-empty".into()));
                }
                if *rank == 0 || *rank > d_model {
                    return Err(Error::Config(format!(
                        "LoRA rank {rank} must be in 1..={d_model}"
                    )));
                }
                if !(*alpha > 0.0) {
                    return Err(Error::Config(format!("LoRA alpha must be positive, got {alpha}")));
                }
                Ok(())
            }
            AdapterConfig::Ia3 {
                targets,
                allow_query,
            } => {
                if targets.is_empty() {
                    return Err(Error::Config("IA3 targets must be non-empty".into()));
                }
                if targets.contains(&Ia3Target::Q) && !allow_query {
                    return Err(Error::Config(
                        "IA3 target q requires allow_query (IA3 scales k, v and ffn)".into(),
                    ));
                }
                Ok(())
            }
            AdapterConfig::Prefix { length } => {
                if *length == 0 {
                    return Err(Error::Config(
                        "prefix length must be >= 1; use variant none for the identity".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn lora_targets(&self) -> &[AttnTarget] {
        match self {
            AdapterConfig::Lora { targets, .. } => targets,
            _ => &[],
        }
    }

    pub fn ia3_targets(&self) -> &[Ia3Target] {
        match self {
            AdapterConfig::Ia3 { targets, .. } => targets,
            _ => &[],
        }
    }

    pub fn prefix_length(&self) -> Option<usize> {
        match self {
            AdapterConfig::Prefix { length } => Some(*length),
            _ => None,
        }
    }
}

/// A linear map `y = x W (+ b)` held in a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Registers `{name}.weight` (normal init) and optionally `{name}.bias` (zeros).
    pub fn register<R: Rng>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        tag: ComponentTag,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert_normal(rng, &weight, &[d_in, d_out], INIT_STD, tag)?;
        let bias = if bias {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(&[d_out]), tag)?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let w = sess.param(&self.weight)?;
        let y = sess.graph.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let b = sess.param(b)?;
                sess.graph.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: String,
    pub b: String,
    pub scale: f64,
}

/// A frozen linear map with optional LoRA delta and IA3 output scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedLinear {
    pub base: Linear,
    pub lora: Option<LoraPair>,
    pub ia3: Option<String>,
}

impl AdaptedLinear {
    pub fn plain(base: Linear) -> Self {
        Self {
            base,
            lora: None,
            ia3: None,
        }
    }

    pub fn forward(&self, sess: &mut Session, x: Var) -> Result<Var> {
        let mut y = self.base.forward(sess, x)?;
        if let Some(lora) = &self.lora {
            let a = sess.param(&lora.a)?;
            let b = sess.param(&lora.b)?;
            let xa = sess.graph.matmul(x, a)?;
            let delta = sess.graph.matmul(xa, b)?;
            let delta = sess.graph.scale(delta, lora.scale);
            y = sess.graph.add(y, delta)?;
        }
        if let Some(l) = &self.ia3 {
            let l = sess.param(l)?;
            y = sess.graph.mul_bias(y, l)?;
        }
        Ok(y)
    }
}

/// Wraps `base` with a LoRA pair named `{name}.lora_a` / `{name}.lora_b`.
pub fn inject_lora<R: Rng>(
    store: &mut ParameterStore,
    rng: &mut R,
    name: &str,
    base: AdaptedLinear,
    rank: usize,
    alpha: f32,
) -> Result<AdaptedLinear> {
    let (d_in, d_out) = (base.base.d_in, base.base.d_out);
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "LoRA rank {rank} exceeds min(d_in, d_out) = {}",
            d_in.min(d_out)
        )));
    }
    let a = format!("{name}.lora_a");
    let b = format!("{name}.lora_b");
    store.insert_normal(rng, &a, &[d_in, rank], INIT_STD, ComponentTag::Adapter)?;
    store.insert(&b, Tensor::zeros(&[rank, d_out]), ComponentTag::Adapter)?;
    Ok(AdaptedLinear {
        lora: Some(LoraPair {
            a,
            b,
            scale: f64::from(alpha) / rank as f64,
        }),
        ..base
    })
}

/// Registers an all-ones IA3 scaling vector `{name}.ia3` of length `dim`.
pub fn inject_ia3(store: &mut ParameterStore, name: &str, dim: usize) -> Result<String> {
    let l = format!("{name}.ia3");
    store.insert(&l, Tensor::ones(&[dim]), ComponentTag::Adapter)?;
    Ok(l)
}

/// Registers a `[P, 2, d]` prefix key/value table `{name}.prefix_kv`.
pub fn inject_prefix<R: Rng>(
    store: &mut ParameterStore,
    rng: &mut R,
    name: &str,
    length: usize,
    d_model: usize,
) -> Result<String> {
    if length == 0 {
        return Err(Error::Config("prefix length must be >= 1".into()));
    }
    let p = format!("{name}.prefix_kv");
    store.insert_normal(rng, &p, &[length, 2, d_model], INIT_STD, ComponentTag::Adapter)?;
    Ok(p)
}

/// Splits a `[P, 2, d]` prefix table into `[P, d]` key and value nodes.
pub fn prefix_kv(sess: &mut Session, name: &str) -> Result<(Var, Var)> {
    let t = sess.param(name)?;
    let shape = sess.graph.shape(t).to_vec();
    let (p, d) = (shape[0], shape[2]);
    let rows = sess.graph.reshape(t, vec![2 * p, d])?;
    let keys: Vec<usize> = (0..p).map(|i| 2 * i).collect();
    let values: Vec<usize> = (0..p).map(|i| 2 * i + 1).collect();
    let k = sess.graph.gather_rows(rows, &keys)?;
    let v = sess.graph.gather_rows(rows, &values)?;
    Ok((k, v))
}

/// Component-tag -> trainable mapping.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezePolicy {
    pub name: String,
    pub rules: BTreeMap<ComponentTag, bool>,
}

impl FreezePolicy {
    pub fn from_rules(name: &str, rules: &[(&str, bool)]) -> Result<Self> {
        let rules = rules
            .iter()
            .map(|(tag, t)| Ok((tag.parse::<ComponentTag>()?, *t)))
            .collect::<Result<_>>()?;
        Ok(Self {
            name: name.to_string(),
            rules,
        })
    }

    fn fixed(name: &str, rules: &[(ComponentTag, bool)]) -> Self {
        Self {
            name: name.to_string(),
            rules: rules.iter().copied().collect(),
        }
    }

    /// Frozen text transformer; adapters, token embeddings, vision tower and
    /// projection heads train.
    pub fn stage1() -> Self {
        use ComponentTag::*;
        Self::fixed(
            "stage1",
            &[
                (TextBase, false),
                (TextEmbedding, true),
                (Adapter, true),
                (Vision, true),
                (Projection, true),
            ],
        )
    }

    /// Entire language model frozen (no adapters, embeddings locked).
    pub fn freeze_lm() -> Self {
        use ComponentTag::*;
        Self::fixed(
            "freeze-lm",
            &[
                (TextBase, false),
                (TextEmbedding, false),
                (Adapter, false),
                (Vision, true),
                (Projection, true),
            ],
        )
    }

    /// Every text parameter trainable.
    pub fn full_ft_lm() -> Self {
        use ComponentTag::*;
        Self::fixed(
            "full-ft-lm",
            &[
                (TextBase, true),
                (TextEmbedding, true),
                (Adapter, true),
                (Vision, true),
                (Projection, true),
            ],
        )
    }

    /// Only the prompt context trains.
    pub fn stage2() -> Self {
        use ComponentTag::*;
        Self::fixed(
            "stage2",
            &[
                (TextBase, false),
                (TextEmbedding, false),
                (Adapter, false),
                (Vision, false),
                (Projection, false),
                (PromptContext, true),
            ],
        )
    }

    /// End-to-end fine-tuning of the model plus a classification head.
    pub fn finetune() -> Self {
        Self::fixed("finetune", &ComponentTag::ALL.map(|t| (t, true)))
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "stage1" => Ok(Self::stage1()),
            "freeze-lm" => Ok(Self::freeze_lm()),
            "full-ft-lm" => Ok(Self::full_ft_lm()),
            "stage2" => Ok(Self::stage2()),
            "finetune" => Ok(Self::finetune()),
            other => Err(Error::Config(format!("unknown freeze policy {other:?}"))),
        }
    }

    pub fn set(&mut self, tag: ComponentTag, trainable: bool) {
        self.rules.insert(tag, trainable);
    }

    /// Sets every entry's trainable flag from its tag.
    pub fn apply(&self, store: &mut ParameterStore) -> Result<()> {
        for (name, p) in store.iter() {
            if !self.rules.contains_key(&p.tag) {
                return Err(Error::Config(format!(
                    "policy {} has no rule for tag {} (parameter {name})",
                    self.name, p.tag
                )));
            }
        }
        for (_, p) in store.iter_mut() {
            p.trainable = self.rules[&p.tag];
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountFilter {
    All,
    TrainableOnly,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub by_tag: BTreeMap<ComponentTag, usize>,
    pub total: usize,
}

impl ParamCounts {
    pub fn tag(&self, tag: ComponentTag) -> usize {
        self.by_tag.get(&tag).copied().unwrap_or(0)
    }

    /// Language-model size: transformer weights plus adapters. The
    /// token-embedding table is reported separately via [`ParamCounts::tag`].
    pub fn language_model(&self) -> usize {
        self.tag(ComponentTag::TextBase) + self.tag(ComponentTag::Adapter)
    }
}

pub fn count_params(store: &ParameterStore, filter: CountFilter) -> ParamCounts {
    let mut counts = ParamCounts::default();
    for (_, p) in store.iter() {
        if filter == CountFilter::TrainableOnly && !p.trainable {
            continue;
        }
        *counts.by_tag.entry(p.tag).or_default() += p.value.numel();
        counts.total += p.value.numel();
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with_linear(d_in: usize, d_out: usize) -> (ParameterStore, AdaptedLinear, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParameterStore::new();
        let lin = Linear::register(&mut store, &mut rng, "l", d_in, d_out, true, ComponentTag::TextBase).unwrap();
        (store, AdaptedLinear::plain(lin), rng)
    }

    fn run(store: &ParameterStore, layer: &AdaptedLinear, x: &Tensor) -> Vec<f64> {
        let mut sess = Session::new(store);
        let xv = sess.graph.constant(x);
        let y = layer.forward(&mut sess, xv).unwrap();
        sess.graph.value(y).to_vec()
    }

    #[test]
    fn lora_at_init_is_bit_identical() {
        let (mut store, base, mut rng) = store_with_linear(6, 5);
        let x = Tensor::new(vec![3, 6], (0..18).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let before = run(&store, &base, &x);
        let adapted = inject_lora(&mut store, &mut rng, "l", base, 2, 4.0).unwrap();
        let after = run(&store, &adapted, &x);
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn lora_hand_matrix_product() {
        let mut store = ParameterStore::new();
        store.insert("l.weight", Tensor::zeros(&[2, 2]), ComponentTag::TextBase).unwrap();
        let base = AdaptedLinear::plain(Linear {
            weight: "l.weight".into(),
            bias: None,
            d_in: 2,
            d_out: 2,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let adapted = inject_lora(&mut store, &mut rng, "l", base, 1, 1.0).unwrap();
        // A = [[1, 0]] (r x d_in), B = [[0], [2]] (d_out x r), stored transposed.
        store.set("l.lora_a", Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap()).unwrap();
        store.set("l.lora_b", Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap()).unwrap();
        let x = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(run(&store, &adapted, &x), vec![0.0, 2.0]);
    }

    #[test]
    fn lora_delta_is_linear_in_alpha() {
        let (mut store, base, mut rng) = store_with_linear(4, 4);
        let x = Tensor::new(vec![2, 4], (0..8).map(|i| i as f32 * 0.25 - 1.0).collect()).unwrap();
        let base_out = run(&store, &base, &x);
        let one = inject_lora(&mut store, &mut rng, "l", base.clone(), 2, 1.0).unwrap();
        store.set("l.lora_b", Tensor::full(&[2, 4], 0.5)).unwrap();
        let two = AdaptedLinear {
            lora: Some(LoraPair {
                scale: 2.0 * one.lora.as_ref().unwrap().scale,
                ..one.lora.clone().unwrap()
            }),
            ..one.clone()
        };
        let (y1, y2) = (run(&store, &one, &x), run(&store, &two, &x));
        for i in 0..y1.len() {
            let (d1, d2) = (y1[i] - base_out[i], y2[i] - base_out[i]);
            assert!((d2 - 2.0 * d1).abs() < 1e-12, "{d1} {d2}");
        }
    }

    #[test]
    fn lora_rank_too_large_is_config_error() {
        let (mut store, base, mut rng) = store_with_linear(4, 3);
        assert!(matches!(
            inject_lora(&mut store, &mut rng, "l", base, 4, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ia3_ones_is_identity() {
        let (mut store, base, _) = store_with_linear(3, 3);
        let x = Tensor::new(vec![1, 3], vec![0.1, -0.2, 0.3]).unwrap();
        let before = run(&store, &base, &x);
        let l = inject_ia3(&mut store, "l", 3).unwrap();
        let adapted = AdaptedLinear {
            ia3: Some(l),
            ..base
        };
        let after = run(&store, &adapted, &x);
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn adapter_config_validation() {
        assert!(AdapterConfig::Prefix { length: 0 }.validate(8).is_err());
        assert!(AdapterConfig::Ia3 {
            targets: vec![Ia3Target::Q],
            allow_query: false
        }
        .validate(8)
        .is_err());
        assert!(AdapterConfig::Ia3 {
            targets: vec![Ia3Target::Q],
            allow_query: true
        }
        .validate(8)
        .is_ok());
        assert!(AdapterConfig::Lora {
            rank: 9,
            alpha: 1.0,
            targets: vec![AttnTarget::Q]
        }
        .validate(8)
        .is_err());
        assert!(AdapterConfig::Lora {
            rank: 2,
            alpha: 1.0,
            targets: vec![]
        }
        .validate(8)
        .is_err());
        let json = serde_json::to_string(&AdapterConfig::lora_default()).unwrap();
        assert_eq!(json, r#"{"variant":"lora","rank":8,"alpha":16.0,"targets":["q","v"]}"#);
    }

    #[test]
    fn freeze_policy_unknown_tag_and_missing_rule() {
        assert!(matches!(
            FreezePolicy::from_rules("x", &[("vision", true), ("decoder", false)]),
            Err(Error::Config(_))
        ));
        let mut store = ParameterStore::new();
        store.insert("ctx", Tensor::ones(&[2]), ComponentTag::PromptContext).unwrap();
        assert!(matches!(FreezePolicy::stage1().apply(&mut store), Err(Error::Config(_))));
        FreezePolicy::stage2().apply(&mut store).unwrap();
        assert!(store.get("ctx").unwrap().trainable);
    }

    #[test]
    fn counts_partition_total() {
        let (mut store, base, mut rng) = store_with_linear(4, 4);
        inject_lora(&mut store, &mut rng, "l", base, 2, 1.0).unwrap();
        store.insert("v", Tensor::ones(&[7]), ComponentTag::Vision).unwrap();
        store.set_trainable("v", false).unwrap();
        let all = count_params(&store, CountFilter::All);
        assert_eq!(all.by_tag.values().sum::<usize>(), all.total);
        assert_eq!(all.tag(ComponentTag::Adapter), 16);
        assert_eq!(all.total, 16 + 4 + 16 + 7);
        let tr = count_params(&store, CountFilter::TrainableOnly);
        assert_eq!(tr.total, 36);
    }
}
