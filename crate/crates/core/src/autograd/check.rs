use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `f` at `x` against central differences
/// and returns the largest per-coordinate [`relative_error`].
///
/// `f` receives a fresh graph and the leaf holding `x` and must return a
/// single-element node.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let base: Vec<f64> = x.data().iter().map(|&v| f64::from(v)).collect();
    let shape = x.shape().to_vec();

    let mut g = Graph::new();
    let leaf = g.leaf_f64(shape.clone(), base.clone(), true)?;
    let loss = f(&mut g, leaf)?;
    g.backward(loss)?;
    let analytic = g.grad(leaf).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; base.len()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let leaf = g.leaf_f64(shape.clone(), values, false)?;
        let out = f(&mut g, leaf)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract("finite_diff_check needs a scalar function".into()));
        }
        Ok(g.scalar(out))
    };

    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += eps;
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
