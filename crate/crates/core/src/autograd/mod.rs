//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a Wengert list: every op appends a node whose parents have
//! smaller indices, so walking the tape backwards is a topological order and
//! each node is visited exactly once. Node values are kept in `f64`; tensors
//! enter and leave the tape as `f32` [`Tensor`]s.
//!
//! Leaf gradients accumulate across repeated [`Graph::backward`] calls until
//! [`Graph::zero_grads`] is called. Intermediate gradients are transient.

mod check;
mod ops;

pub use check::{finite_diff_check, relative_error};
pub use ops::AttentionGeometry;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Additive mask applied to disallowed attention/logit entries.
pub const MASK_VALUE: f64 = -1e9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn tape_id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: ops::Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a leaf holding a copy of `t`.
    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        let value = t.data().iter().map(|&v| f64::from(v)).collect();
        self.push(t.shape().to_vec(), value, requires_grad, ops::Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Leaf from raw `f64` values (used by gradient checks and masks).
    pub fn leaf_f64(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::Dimension {
                op: "leaf",
                lhs: shape,
                rhs: vec![value.len()],
            });
        }
        Ok(self.push(shape, value, requires_grad, ops::Op::Leaf))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value rounded back to an `f32` tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.iter().map(|&x| x as f32).collect())
            .expect("node shapes are always consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf; `None` if nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Accumulated gradient as a tensor, zeros when nothing flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        match &n.grad {
            Some(g) => Tensor::new(n.shape.clone(), g.iter().map(|&x| x as f32).collect())
                .expect("grad shape equals value shape"),
            None => Tensor::zeros(&n.shape),
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf grads.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, ops::Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
            } else {
                self.backward_node(i, &g, &mut grads);
            }
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: ops::Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_requires_grad(&self, parents: &[Var]) -> bool {
        parents.iter().any(|p| self.nodes[p.0].requires_grad)
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    let numel: usize = shape.iter().product();
    (numel / cols.max(1), cols)
}
