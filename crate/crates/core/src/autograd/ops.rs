use super::{rows_cols, Graph, Var, MASK_VALUE};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Batch layout for [`Graph::attention`].
///
/// Queries, keys and values are stacked as `[batch * seq, d_model]`; heads
/// split the trailing axis into `heads` contiguous blocks.
#[derive(Clone, Debug)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub causal: bool,
    /// Per stacked row, whether that position may be attended to as a key.
    pub key_valid: Option<Vec<bool>>,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    MulBias(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Gelu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    /// `probs` is zero on excluded entries.
    LogSumExpRows { x: Var, probs: Vec<f64> },
    Diagonal(Var),
    GatherRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    MeanGroups(Var, usize),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    TileRows(Var, usize),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        geom: AttentionGeometry,
        probs: Vec<f64>,
    },
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Row-major `[m, k] x [k, n]`.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    fn unary(&mut self, x: Var, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, value, rg, op)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(dim_err(op, sa, sb));
        }
        Ok(())
    }

    fn bias_shape(&self, op: &'static str, x: Var, b: Var) -> Result<usize> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.value(b).len() != cols {
            return Err(dim_err(op, self.shape(x), self.shape(b)));
        }
        Ok(cols)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(dim_err(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(vec![m, n], value, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a `[d]` vector to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let cols = self.bias_shape("add_bias", x, bias)?;
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % cols])
            .collect();
        let rg = self.any_requires_grad(&[x, bias]);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), value, rg, Op::Mul(a, b)))
    }

    /// Multiplies every row of `x` elementwise by a `[d]` vector.
    pub fn mul_bias(&mut self, x: Var, scale: Var) -> Result<Var> {
        let cols = self.bias_shape("mul_bias", x, scale)?;
        let s = self.value(scale);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * s[i % cols])
            .collect();
        let rg = self.any_requires_grad(&[x, scale]);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::MulBias(x, scale)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * c).collect();
        self.unary(x, self.shape(x).to_vec(), value, Op::Scale(x, c))
    }

    /// Multiplies `x` by a single-element node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(dim_err("mul_scalar", self.shape(x), self.shape(s)));
        }
        let c = self.scalar(s);
        let value = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.any_requires_grad(&[x, s]);
        Ok(self.push(self.shape(x).to_vec(), value, rg, Op::MulScalar(x, s)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|v| v.exp()).collect();
        self.unary(x, self.shape(x).to_vec(), value, Op::Exp(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).iter().map(|&v| gelu(v)).collect();
        self.unary(x, self.shape(x).to_vec(), value, Op::Gelu(x))
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let mut value = self.value(x).to_vec();
        value.chunks_mut(cols).for_each(softmax_in_place);
        self.unary(x, self.shape(x).to_vec(), value, Op::Softmax(x))
    }

    /// Per-row normalisation (biased variance) followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let cols = self.bias_shape("layer_norm", x, gamma)?;
        self.bias_shape("layer_norm", x, beta)?;
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                value[r * cols + c] = gv[c] * h + bv[c];
            }
        }
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        Ok(self.push(
            self.shape(x).to_vec(),
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(dim_err("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Index {
                what: "class target",
                index: bad,
                bound: c,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            softmax_in_place(row);
        }
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss / n as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Row-wise log-sum-exp of a square or rectangular matrix, optionally
    /// skipping the diagonal entry of each row.
    pub fn logsumexp_rows(&mut self, x: Var, exclude_diagonal: bool) -> Result<Var> {
        let (n, m) = self.matrix("logsumexp_rows", x)?;
        if exclude_diagonal && (n != m || m < 2) {
            return Err(dim_err("logsumexp_rows", self.shape(x), &[n, n]));
        }
        let mut probs = self.value(x).to_vec();
        let mut value = vec![0.0; n];
        for (r, row) in probs.chunks_mut(m).enumerate() {
            let allowed = |j: usize| !(exclude_diagonal && j == r);
            let max = (0..m).filter(|&j| allowed(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                *v = if allowed(j) { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
            value[r] = max + sum.ln();
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![n],
            value,
            rg,
            Op::LogSumExpRows { x, probs },
        ))
    }

    pub fn diagonal(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix("diagonal", x)?;
        if n != m {
            return Err(dim_err("diagonal", self.shape(x), &[n, n]));
        }
        let xv = self.value(x);
        let value = (0..n).map(|i| xv[i * n + i]).collect();
        Ok(self.unary(x, vec![n], value, Op::Diagonal(x)))
    }

    /// Selects rows of `x` by index; the gradient scatter-adds.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "row",
                index: bad,
                bound: rows,
            });
        }
        let xv = self.value(x);
        let mut value = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            value.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        Ok(self.unary(x, vec![idx.len(), cols], value, Op::GatherRows(x, idx.to_vec())))
    }

    /// Token-embedding lookup: rows of `table` selected by token id.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.unary(x, vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.iter().sum::<f64>() / v.len() as f64;
        self.unary(x, vec![1], vec![m], Op::Mean(x))
    }

    /// Averages consecutive groups of `group` rows: `[g * group, d] -> [g, d]`.
    pub fn mean_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        if group == 0 || rows % group != 0 {
            return Err(dim_err("mean_groups", self.shape(x), &[group]));
        }
        let g = rows / group;
        let xv = self.value(x);
        let mut value = vec![0.0; g * cols];
        for r in 0..rows {
            let out = &mut value[(r / group) * cols..(r / group + 1) * cols];
            for (o, v) in out.iter_mut().zip(&xv[r * cols..(r + 1) * cols]) {
                *o += v;
            }
        }
        value.iter_mut().for_each(|v| *v /= group as f64);
        Ok(self.unary(x, vec![g, cols], value, Op::MeanGroups(x, group)))
    }

    /// Concatenates along the leading (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (_, cols) = rows_cols(self.shape(first));
        let mut value = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != cols {
                return Err(dim_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            value.extend_from_slice(self.value(p));
        }
        let rg = self.any_requires_grad(parts);
        Ok(self.push(vec![rows, cols], value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix("transpose", x)?;
        let value = transpose_raw(self.value(x), r, c);
        Ok(self.unary(x, vec![c, r], value, Op::Transpose(x)))
    }

    /// Scales each row to unit L2 norm; rows with norm below `eps` map to zero.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let (rows, cols) = rows_cols(self.shape(x));
        let xv = self.value(x);
        let mut norms = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[r] = n;
            if n >= eps {
                for c in 0..cols {
                    value[r * cols + c] = row[c] / n;
                }
            }
        }
        self.unary(x, self.shape(x).to_vec(), value, Op::L2Normalize { x, norms, eps })
    }

    /// Repeats all rows of `x` `times` times: `[s, d] -> [times * s, d]`.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Contract("tile_rows with zero repeats".into()));
        }
        let (rows, cols) = rows_cols(self.shape(x));
        let value = self.value(x).repeat(times);
        Ok(self.unary(x, vec![rows * times, cols], value, Op::TileRows(x, times)))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(dim_err("reshape", self.shape(x), &shape));
        }
        let value = self.value(x).to_vec();
        Ok(self.unary(x, shape, value, Op::Reshape(x)))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[batch * seq, d]`. `prefix`, when present, holds
    /// `[p, d]` key and value rows that every query in every batch element can
    /// see, ahead of the sequence keys.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        prefix: Option<(Var, Var)>,
        geom: &AttentionGeometry,
    ) -> Result<Var> {
        let rows = geom.batch * geom.seq;
        let (qr, d) = self.matrix("attention", q)?;
        for t in [k, v] {
            if self.shape(t) != [rows, d] {
                return Err(dim_err("attention", self.shape(q), self.shape(t)));
            }
        }
        if qr != rows || geom.heads == 0 || d % geom.heads != 0 {
            return Err(dim_err("attention", self.shape(q), &[rows, geom.heads]));
        }
        if let Some(mask) = &geom.key_valid {
            if mask.len() != rows {
                return Err(dim_err("attention", &[rows], &[mask.len()]));
            }
        }
        let (p, pk, pv) = match prefix {
            Some((pk, pv)) => {
                let (pr, pd) = self.matrix("attention", pk)?;
                if pd != d || self.shape(pv) != [pr, d] {
                    return Err(dim_err("attention", self.shape(pk), self.shape(pv)));
                }
                (pr, self.value(pk), self.value(pv))
            }
            None => (0, &[][..], &[][..]),
        };
        let (value, probs) =
            attention_forward(self.value(q), self.value(k), self.value(v), pk, pv, p, d, geom);
        let mut parents = vec![q, k, v];
        if let Some((a, b)) = prefix {
            parents.extend([a, b]);
        }
        let rg = self.any_requires_grad(&parents);
        Ok(self.push(
            vec![rows, d],
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                prefix,
                geom: geom.clone(),
                probs,
            },
        ))
    }

    pub(super) fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if rg(*a) {
                    let bt = transpose_raw(self.value(*b), k, n);
                    let da = matmul_raw(g, &bt, m, n, k);
                    add_into(acc(grads, *a, m * k), &da);
                }
                if rg(*b) {
                    let at = transpose_raw(self.value(*a), m, k);
                    let db = matmul_raw(&at, g, k, m, n);
                    add_into(acc(grads, *b, k * n), &db);
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if rg(p) {
                        add_into(acc(grads, p, g.len()), g);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if rg(*x) {
                    add_into(acc(grads, *x, g.len()), g);
                }
                if rg(*b) {
                    let cols = len(*b);
                    let db = acc(grads, *b, cols);
                    for (j, gv) in g.iter().enumerate() {
                        db[j % cols] += gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if rg(*a) {
                    let da = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if rg(*b) {
                    let db = acc(grads, *b, g.len());
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::MulBias(x, s) => {
                let cols = len(*s);
                let (xv, sv) = (self.value(*x), self.value(*s));
                if rg(*x) {
                    let dx = acc(grads, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] * sv[j % cols];
                    }
                }
                if rg(*s) {
                    let ds = acc(grads, *s, cols);
                    for j in 0..g.len() {
                        ds[j % cols] += g[j] * xv[j];
                    }
                }
            }
            Op::Scale(x, c) => {
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * c;
                }
            }
            Op::MulScalar(x, s) => {
                let c = self.scalar(*s);
                if rg(*x) {
                    let dx = acc(grads, *x, g.len());
                    for j in 0..g.len() {
                        dx[j] += g[j] * c;
                    }
                }
                if rg(*s) {
                    let d: f64 = g.iter().zip(self.value(*x)).map(|(a, b)| a * b).sum();
                    acc(grads, *s, 1)[0] += d;
                }
            }
            Op::Exp(x) => {
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * node.value[j];
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = acc(grads, *x, g.len());
                for j in 0..g.len() {
                    dx[j] += g[j] * gelu_grad(xv[j]);
                }
            }
            Op::Softmax(x) => {
                let (_, cols) = rows_cols(&node.shape);
                let dx = acc(grads, *x, g.len());
                for r in 0..g.len() / cols {
                    let y = &node.value[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] += y[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let cols = len(*gamma);
                let rows = g.len() / cols;
                let gv = self.value(*gamma);
                if rg(*gamma) {
                    let dg = acc(grads, *gamma, cols);
                    for j in 0..g.len() {
                        dg[j % cols] += g[j] * xhat[j];
                    }
                }
                if rg(*beta) {
                    let db = acc(grads, *beta, cols);
                    for j in 0..g.len() {
                        db[j % cols] += g[j];
                    }
                }
                if rg(*x) {
                    let dx = acc(grads, *x, g.len());
                    for r in 0..rows {
                        let o = r * cols;
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let dh = g[o + c] * gv[c];
                            mean_d += dh;
                            mean_dx += dh * xhat[o + c];
                        }
                        mean_d /= cols as f64;
                        mean_dx /= cols as f64;
                        for c in 0..cols {
                            let dh = g[o + c] * gv[c];
                            dx[o + c] += rstd[r] * (dh - mean_d - xhat[o + c] * mean_dx);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let dl = acc(grads, *logits, probs.len());
                for r in 0..n {
                    for j in 0..c {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        dl[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::LogSumExpRows { x, probs, .. } => {
                let n = g.len();
                let m = probs.len() / n;
                let dx = acc(grads, *x, probs.len());
                for r in 0..n {
                    for j in 0..m {
                        dx[r * m + j] += g[r] * probs[r * m + j];
                    }
                }
            }
            Op::Diagonal(x) => {
                let n = g.len();
                let dx = acc(grads, *x, n * n);
                for r in 0..n {
                    dx[r * n + r] += g[r];
                }
            }
            Op::GatherRows(x, idx) => {
                let cols = node.shape[1];
                let dx = acc(grads, *x, len(*x));
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..cols {
                        dx[src * cols + c] += g[r * cols + c];
                    }
                }
            }
            Op::Sum(x) => {
                acc(grads, *x, len(*x)).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let n = len(*x);
                let s = g[0] / n as f64;
                acc(grads, *x, n).iter_mut().for_each(|d| *d += s);
            }
            Op::MeanGroups(x, group) => {
                let cols = node.shape[1];
                let n = len(*x);
                let dx = acc(grads, *x, n);
                for j in 0..n {
                    let (r, c) = (j / cols, j % cols);
                    dx[j] += g[(r / group) * cols + c] / *group as f64;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if rg(p) {
                        add_into(acc(grads, p, n), &g[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let gt = transpose_raw(g, r, c);
                add_into(acc(grads, *x, g.len()), &gt);
            }
            Op::L2Normalize { x, norms, eps } => {
                let (_, cols) = rows_cols(&node.shape);
                let dx = acc(grads, *x, g.len());
                for (r, &n) in norms.iter().enumerate() {
                    if n < *eps {
                        continue;
                    }
                    let o = r * cols;
                    let y = &node.value[o..o + cols];
                    let gr = &g[o..o + cols];
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[o + c] += (gr[c] - y[c] * dot) / n;
                    }
                }
            }
            Op::TileRows(x, times) => {
                let n = len(*x);
                let dx = acc(grads, *x, n);
                for t in 0..*times {
                    add_into(dx, &g[t * n..(t + 1) * n]);
                }
            }
            Op::Reshape(x) => add_into(acc(grads, *x, g.len()), g),
            Op::Attention {
                q,
                k,
                v,
                prefix,
                geom,
                probs,
            } => {
                let d = node.shape[1];
                let (p, pk, pv) = match prefix {
                    Some((a, b)) => (self.shape(*a)[0], self.value(*a), self.value(*b)),
                    None => (0, &[][..], &[][..]),
                };
                let grads_out = attention_backward(
                    g,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    pk,
                    pv,
                    p,
                    d,
                    geom,
                    probs,
                );
                let n = g.len();
                for (var, dv) in [(*q, &grads_out.dq), (*k, &grads_out.dk), (*v, &grads_out.dv)] {
                    if rg(var) {
                        add_into(acc(grads, var, n), dv);
                    }
                }
                if let Some((a, b)) = prefix {
                    if rg(*a) {
                        add_into(acc(grads, *a, p * d), &grads_out.dpk);
                    }
                    if rg(*b) {
                        add_into(acc(grads, *b, p * d), &grads_out.dpv);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Key `j` of `P + S` keys: prefix rows first, then the sequence rows.
#[inline]
fn key_row<'a>(j: usize, p: usize, pk: &'a [f64], k: &'a [f64], base: usize, d: usize) -> &'a [f64] {
    if j < p {
        &pk[j * d..(j + 1) * d]
    } else {
        let r = base + j - p;
        &k[r * d..(r + 1) * d]
    }
}

fn key_masked(geom: &AttentionGeometry, b: usize, i: usize, j_seq: usize) -> bool {
    (geom.causal && j_seq > i)
        || geom
            .key_valid
            .as_ref()
            .is_some_and(|m| !m[b * geom.seq + j_seq])
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    pk: &[f64],
    pv: &[f64],
    p: usize,
    d: usize,
    geom: &AttentionGeometry,
) -> (Vec<f64>, Vec<f64>) {
    let (s, h) = (geom.seq, geom.heads);
    let dh = d / h;
    let nk = p + s;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; geom.batch * s * d];
    let mut probs = vec![0.0; geom.batch * h * s * nk];
    for b in 0..geom.batch {
        let base = b * s;
        for head in 0..h {
            let off = head * dh;
            for i in 0..s {
                let qrow = &q[(base + i) * d + off..(base + i) * d + off + dh];
                let prow = &mut probs[((b * h + head) * s + i) * nk..((b * h + head) * s + i + 1) * nk];
                for (j, pj) in prow.iter_mut().enumerate() {
                    let krow = &key_row(j, p, pk, k, base, d)[off..off + dh];
                    let dot: f64 = qrow.iter().zip(krow).map(|(a, c)| a * c).sum();
                    let mask = if j >= p && key_masked(geom, b, i, j - p) { MASK_VALUE } else { 0.0 };
                    *pj = dot * scale + mask;
                }
                softmax_in_place(prow);
                let orow = &mut out[(base + i) * d + off..(base + i) * d + off + dh];
                for (j, &pj) in prow.iter().enumerate() {
                    let vrow = &key_row(j, p, pv, v, base, d)[off..off + dh];
                    for (o, vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

struct AttentionGrads {
    dq: Vec<f64>,
    dk: Vec<f64>,
    dv: Vec<f64>,
    dpk: Vec<f64>,
    dpv: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn attention_backward(
    dout: &[f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    pk: &[f64],
    pv: &[f64],
    p: usize,
    d: usize,
    geom: &AttentionGeometry,
    probs: &[f64],
) -> AttentionGrads {
    let (s, h) = (geom.seq, geom.heads);
    let dh = d / h;
    let nk = p + s;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = dout.len();
    let mut gr = AttentionGrads {
        dq: vec![0.0; n],
        dk: vec![0.0; n],
        dv: vec![0.0; n],
        dpk: vec![0.0; p * d],
        dpv: vec![0.0; p * d],
    };
    let mut dp = vec![0.0; nk];
    for b in 0..geom.batch {
        let base = b * s;
        for head in 0..h {
            let off = head * dh;
            for i in 0..s {
                let prow = &probs[((b * h + head) * s + i) * nk..((b * h + head) * s + i + 1) * nk];
                let qi = (base + i) * d + off;
                let go = &dout[qi..qi + dh];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    let vrow = &key_row(j, p, pv, v, base, d)[off..off + dh];
                    *dpj = go.iter().zip(vrow).map(|(a, c)| a * c).sum();
                }
                let dot: f64 = prow.iter().zip(&dp).map(|(a, c)| a * c).sum();
                for j in 0..nk {
                    let pj = prow[j];
                    if pj == 0.0 {
                        continue;
                    }
                    let ds = pj * (dp[j] - dot) * scale;
                    let (dk_buf, dv_buf, row) = if j < p {
                        (&mut gr.dpk, &mut gr.dpv, j)
                    } else {
                        (&mut gr.dk, &mut gr.dv, base + j - p)
                    };
                    let krow = &key_row(j, p, pk, k, base, d)[off..off + dh];
                    for t in 0..dh {
                        gr.dq[qi + t] += ds * krow[t];
                        dk_buf[row * d + off + t] += ds * q[qi + t];
                        dv_buf[row * d + off + t] += pj * go[t];
                    }
                }
            }
        }
    }
    gr
}
