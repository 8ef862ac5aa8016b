//! Named parameter registry with per-entry trainable flags.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to; freeze policies act on tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentTag {
    Vision,
    TextBase,
    TextEmbedding,
    Adapter,
    Projection,
    PromptContext,
    Probe,
}

impl ComponentTag {
    pub const ALL: [ComponentTag; 7] = [
        ComponentTag::Vision,
        ComponentTag::TextBase,
        ComponentTag::TextEmbedding,
        ComponentTag::Adapter,
        ComponentTag::Projection,
        ComponentTag::PromptContext,
        ComponentTag::Probe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentTag::Vision => "vision",
            ComponentTag::TextBase => "text_base",
            ComponentTag::TextEmbedding => "text_embedding",
            ComponentTag::Adapter => "adapter",
            ComponentTag::Projection => "projection",
            ComponentTag::PromptContext => "prompt_context",
            ComponentTag::Probe => "probe",
        }
    }
}

impl fmt::Display for ComponentTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown component tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: Tensor,
    pub trainable: bool,
    pub tag: ComponentTag,
}

/// Ordered `name -> parameter` map. Iteration is lexicographic by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, tag: ComponentTag) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(
            name,
            Parameter {
                value,
                trainable: true,
                tag,
            },
        );
        Ok(())
    }

    /// Inserts a `normal(0, std)` initialised tensor.
    pub fn insert_normal<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        shape: &[usize],
        std: f32,
        tag: ComponentTag,
    ) -> Result<()> {
        let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, tag)
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Parameter> {
        self.entries.remove(name)
    }

    /// Replaces a tensor's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set parameter",
                lhs: p.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.get_mut(name)?.trainable = trainable;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose tag is in `tags`, as a new store.
    pub fn subset(&self, tags: &[ComponentTag]) -> ParameterStore {
        ParameterStore {
            entries: self
                .entries
                .iter()
                .filter(|(_, p)| tags.contains(&p.tag))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Overwrites values from `other` for every name present in both.
    /// Shapes must agree. Returns the number of tensors copied.
    pub fn load_values(&mut self, other: &BTreeMap<String, Tensor>) -> Result<usize> {
        let mut copied = 0;
        for (name, t) in other {
            if self.contains(name) {
                self.set(name, t.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn values(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.clone()))
            .collect()
    }

    /// Names of entries whose values differ bitwise from `other`.
    pub fn changed_since(&self, other: &ParameterStore) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(name, p)| {
                other.entries.get(*name).is_none_or(|q| {
                    p.value.shape() != q.value.shape()
                        || p.value
                            .data()
                            .iter()
                            .zip(q.value.data())
                            .any(|(a, b)| a.to_bits() != b.to_bits())
                })
            })
            .map(|(k, _)| k.clone())
            .collect()
    }
}

/// A forward pass over a [`ParameterStore`]: parameters become graph leaves on
/// first use, requiring grad only when trainable.
pub struct Session<'s> {
    pub graph: Graph,
    store: &'s ParameterStore,
    bound: BTreeMap<String, Var>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParameterStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParameterStore {
        self.store
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let p = self.store.get(name)?;
        let v = self.graph.leaf(&p.value, p.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name` to an existing node instead of the stored value.
    pub fn bind(&mut self, name: &str, var: Var) -> Result<()> {
        let p = self.store.get(name)?;
        if p.value.shape() != self.graph.shape(var) {
            return Err(Error::Dimension {
                op: "bind",
                lhs: p.value.shape().to_vec(),
                rhs: self.graph.shape(var).to_vec(),
            });
        }
        self.bound.insert(name.to_string(), var);
        Ok(())
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    /// Gradients of bound trainable parameters that received any.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter(|(name, _)| self.store.get(name).is_ok_and(|p| p.trainable))
            .filter(|(_, &v)| self.graph.grad(v).is_some())
            .map(|(name, &v)| (name.clone(), self.graph.grad_tensor(v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iteration_is_lexicographic_and_names_unique() {
        let mut s = ParameterStore::new();
        s.insert("b", Tensor::ones(&[1]), ComponentTag::Vision).unwrap();
        s.insert("a.2", Tensor::ones(&[1]), ComponentTag::Vision).unwrap();
        s.insert("a.10", Tensor::ones(&[1]), ComponentTag::Vision).unwrap();
        assert!(s.insert("b", Tensor::ones(&[1]), ComponentTag::Vision).is_err());
        let names: Vec<_> = s.names().collect();
        assert_eq!(names, ["a.10", "a.2", "b"]);
    }

    #[test]
    fn tag_parsing() {
        assert_eq!("text_base".parse::<ComponentTag>().unwrap(), ComponentTag::TextBase);
        assert!(matches!("encoder".parse::<ComponentTag>(), Err(Error::Config(_))));
    }

    #[test]
    fn session_only_tracks_trainable_grads() {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::full(&[2], 2.0), ComponentTag::Vision).unwrap();
        s.insert("frozen", Tensor::full(&[2], 3.0), ComponentTag::TextBase).unwrap();
        s.set_trainable("frozen", false).unwrap();
        let mut sess = Session::new(&s);
        let w = sess.param("w").unwrap();
        let f = sess.param("frozen").unwrap();
        let y = sess.graph.mul(w, f).unwrap();
        let l = sess.graph.sum(y);
        sess.graph.backward(l).unwrap();
        let grads = sess.grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads["w"].data(), &[3.0, 3.0]);
    }

    #[test]
    fn changed_since_is_bitwise() {
        let mut a = ParameterStore::new();
        a.insert("x", Tensor::zeros(&[2]), ComponentTag::Vision).unwrap();
        a.insert("y", Tensor::zeros(&[2]), ComponentTag::Vision).unwrap();
        let mut b = a.clone();
        b.set("y", Tensor::new(vec![2], vec![-0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(b.changed_since(&a), vec!["y".to_string()]);
    }
}
