//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is built eagerly: every primitive computes its value
//! immediately and appends a node holding whatever it needs for the
//! backward pass. Node indices are therefore already in topological order,
//! and [`Graph::backward`] walks them once in reverse.
//!
//! Only the primitives the model and losses need are provided. Matrices are
//! `[rows, cols]`; anything of higher rank is viewed as
//! `[shape[0], product(rest)]` by the row-wise primitives.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, NORM_FLOOR};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulNt { a: usize, b: usize },
    AddBias { x: usize, bias: usize },
    Relu { x: usize },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        training: bool,
    },
    MeanPoolRows { x: usize, group: usize },
    Reshape { x: usize },
    ConcatRows { parts: Vec<usize> },
    Rows { x: usize, start: usize },
    L2NormRows { x: usize, norms: Vec<f64> },
    Dot { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Sum { x: usize },
    Log { x: usize },
    Exp { x: usize },
    WeightedLogSumExp { x: usize, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation plus gradient buffers.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    names: HashMap<String, Var>,
    norm_floor_hits: usize,
}

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::NotEvaluated(v.0))
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// A constant leaf; no gradient is ever written for it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf, retrievable later by `name`.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.names.insert(name.to_string(), v);
        v
    }

    /// A named constant leaf.
    pub fn bind(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.input(t);
        self.names.insert(name.to_string(), v);
        v
    }

    pub fn lookup(&self, name: &str) -> Option<Var> {
        self.names.get(name).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// How many rows the L2 normalization left untouched because their norm
    /// was below the floor.
    pub fn norm_floor_hits(&self) -> usize {
        self.norm_floor_hits
    }

    /// Batch mean and biased variance recorded by a training-mode batch norm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes.get(v.0)?.op {
            Op::BatchNorm {
                mean,
                var,
                training: true,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    /// `a [m,k] @ b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (m, k) = check_matrix("matmul", ta)?;
        let (k2, n) = check_matrix("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} @ {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMul { a: a.0, b: b.0 },
            rg,
        ))
    }

    /// `a [m,k] @ b [n,k]^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (m, k) = check_matrix("matmul_nt", ta)?;
        let (n, k2) = check_matrix("matmul_nt", tb)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("{:?} @ {:?}^T", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let ar = &ta.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &tb.data()[j * k..(j + 1) * k];
                out[i * n + j] = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::MatMulNt { a: a.0, b: b.0 },
            rg,
        ))
    }

    /// Adds a `[n]` bias to every row of `x [m,n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (&self.node(x)?.value, &self.node(bias)?.value);
        let (m, n) = check_matrix("add_bias", tx)?;
        if tb.len() != n {
            return Err(Error::shape(
                "add_bias",
                format!("input {:?} with bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.data().to_vec();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x.0) || self.rg(bias.0);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::AddBias {
                x: x.0,
                bias: bias.0,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let out: Vec<f64> = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x.0);
        Ok(self.push(t, Op::Relu { x: x.0 }, rg))
    }

    /// Per-column batch normalization of `x [m,n]` using the batch's own
    /// mean and biased variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (m, n) = check_matrix("batch_norm", tx)?;
        let mut mean = vec![0.0; n];
        for r in 0..m {
            for (acc, v) in mean.iter_mut().zip(tx.row(r)) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; n];
        for r in 0..m {
            for ((acc, v), mu) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                *acc += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        self.batch_norm_with(x, gamma, beta, eps, mean, var, true)
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        self.batch_norm_with(
            x,
            gamma,
            beta,
            eps,
            running_mean.to_vec(),
            running_var.to_vec(),
            false,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mean: Vec<f64>,
        var: Vec<f64>,
        training: bool,
    ) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (m, n) = check_matrix("batch_norm", tx)?;
        let (tg, tb) = (&self.node(gamma)?.value, &self.node(beta)?.value);
        if tg.len() != n || tb.len() != n || mean.len() != n || var.len() != n {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "input {:?}, gamma {:?}, beta {:?}, stats {}",
                    tx.shape(),
                    tg.shape(),
                    tb.shape(),
                    mean.len()
                ),
            ));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; m * n];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                let h = (tx.data()[r * n + c] - mean[c]) * inv_std[c];
                xhat[r * n + c] = h;
                out[r * n + c] = tg.data()[c] * h + tb.data()[c];
            }
        }
        let rg = self.rg(x.0) || self.rg(gamma.0) || self.rg(beta.0);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                mean,
                var,
                training,
            },
            rg,
        ))
    }

    /// Averages each consecutive block of `group` rows: `[m, n] -> [m/group, n]`.
    pub fn mean_pool_rows(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (m, n) = check_matrix("mean_pool_rows", tx)?;
        if group == 0 || m % group != 0 {
            return Err(Error::shape(
                "mean_pool_rows",
                format!("{m} rows not divisible into groups of {group}"),
            ));
        }
        let g = m / group;
        let mut out = vec![0.0; g * n];
        for r in 0..m {
            let o = &mut out[(r / group) * n..(r / group + 1) * n];
            for (acc, v) in o.iter_mut().zip(tx.row(r)) {
                *acc += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= group as f64);
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::matrix(g, n, out)?,
            Op::MeanPoolRows { x: x.0, group },
            rg,
        ))
    }

    /// Reinterprets the row-major buffer under a new shape. Reshaping
    /// `[b*k, n]` to `[b, k*n]` concatenates each group of `k` rows.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.node(x)?.value.clone().reshape(shape)?;
        let rg = self.rg(x.0);
        Ok(self.push(t, Op::Reshape { x: x.0 }, rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let n = self.node(*first)?.value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for p in parts {
            let t = &self.node(*p)?.value;
            if t.cols() != n {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column count {} vs {n} ({:?})", t.cols(), t.shape()),
                ));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
            rg |= self.rg(p.0);
        }
        let parts = parts.iter().map(|p| p.0).collect();
        Ok(self.push(Tensor::matrix(rows, n, data)?, Op::ConcatRows { parts }, rg))
    }

    /// Rows `start..start+count` of `x`.
    pub fn rows(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (m, n) = (tx.rows(), tx.cols());
        if count == 0 || start + count > m {
            return Err(Error::shape(
                "rows",
                format!("rows {start}..{} of {:?}", start + count, tx.shape()),
            ));
        }
        let data = tx.data()[start * n..(start + count) * n].to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::matrix(count, n, data)?,
            Op::Rows { x: x.0, start },
            rg,
        ))
    }

    /// Normalizes every row to unit length. Rows with norm below
    /// [`NORM_FLOOR`] pass through unchanged and bump
    /// [`Graph::norm_floor_hits`].
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = tx.data().to_vec();
        let mut norms = vec![0.0; m];
        let mut hits = 0;
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let nr = crate::tensor::norm(row);
            norms[r] = nr;
            if nr < NORM_FLOOR {
                hits += 1;
            } else {
                row.iter_mut().for_each(|v| *v /= nr);
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        self.norm_floor_hits += hits;
        let rg = self.rg(x.0);
        Ok(self.push(t, Op::L2NormRows { x: x.0, norms }, rg))
    }

    /// Sum of elementwise products of two equally sized tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        if ta.len() != tb.len() {
            return Err(Error::shape("dot", format!("{:?} . {:?}", ta.shape(), tb.shape())));
        }
        let s = crate::tensor::dot(ta.data(), tb.data());
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(Tensor::scalar(s), Op::Dot { a: a.0, b: b.0 }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(x.0);
        Ok(self.push(t, Op::Scale { x: x.0, c }, rg))
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        same_shape(op_name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().sum();
        let rg = self.rg(x.0);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: x.0 }, rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.ln()).collect())?;
        if !t.all_finite() {
            return Err(Error::non_finite("log of a non-positive value"));
        }
        let rg = self.rg(x.0);
        Ok(self.push(t, Op::Log { x: x.0 }, rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let tx = &self.node(x)?.value;
        let t = Tensor::new(tx.shape().to_vec(), tx.data().iter().map(|v| v.exp()).collect())?;
        let rg = self.rg(x.0);
        Ok(self.push(t, Op::Exp { x: x.0 }, rg))
    }

    /// `log(sum_k w_k * exp(x_k))` over all elements of `x`, evaluated with
    /// max-subtraction. Weights must be non-negative with at least one
    /// positive entry; zero-weight entries do not participate.
    pub fn weighted_log_sum_exp(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let tx = &self.node(x)?.value;
        if weights.len() != tx.len() {
            return Err(Error::shape(
                "weighted_log_sum_exp",
                format!("{} weights for input {:?}", weights.len(), tx.shape()),
            ));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::shape("weighted_log_sum_exp", "weights must be finite and >= 0"));
        }
        let mut max = f64::NEG_INFINITY;
        for (k, (&v, &w)) in tx.data().iter().zip(weights).enumerate() {
            if !v.is_finite() {
                return Err(Error::non_finite(format!("log-sum-exp input at position {k}")));
            }
            if w > 0.0 && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::shape("weighted_log_sum_exp", "all weights are zero"));
        }
        let mut probs: Vec<f64> = tx
            .data()
            .iter()
            .zip(weights)
            .map(|(&v, &w)| if w > 0.0 { w * (v - max).exp() } else { 0.0 })
            .collect();
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        let out = max + s.ln();
        let rg = self.rg(x.0);
        Ok(self.push(
            Tensor::scalar(out),
            Op::WeightedLogSumExp { x: x.0, probs },
            rg,
        ))
    }

    /// Unweighted log-sum-exp over all elements of `x`.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len();
        self.weighted_log_sum_exp(x, &vec![1.0; n])
    }

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that (transitively) depends on a trainable leaf. Previous gradients
    /// are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.node(loss)?;
        if !root.value.is_scalar() {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        let root_rg = root.requires_grad;
        self.grads = vec![None; self.nodes.len()];
        if !root_rg {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, idx: usize, contribution: Vec<f64>) {
        if !self.nodes[idx].requires_grad {
            return;
        }
        match &mut self.grads[idx] {
            Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        let node = &self.nodes[idx];
        let mut updates: Vec<(usize, Vec<f64>)> = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(a) {
                    // dA = dY @ B^T
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let br = &tb.data()[p * n..(p + 1) * n];
                            da[i * k + p] = gr.iter().zip(br).map(|(x, y)| x * y).sum();
                        }
                    }
                    updates.push((a, da));
                }
                if self.rg(b) {
                    // dB = A^T @ dY
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            let dr = &mut db[p * n..(p + 1) * n];
                            for (d, gv) in dr.iter_mut().zip(gr) {
                                *d += av * gv;
                            }
                        }
                    }
                    updates.push((b, db));
                }
            }
            &Op::MatMulNt { a, b } => {
                let (ta, tb) = (&self.nodes[a].value, &self.nodes[b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.rg(a) {
                    // dA = dY @ B
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, tb.data(), &mut da, m, n, k);
                    updates.push((a, da));
                }
                if self.rg(b) {
                    // dB = dY^T @ A
                    let mut db = vec![0.0; n * k];
                    for i in 0..m {
                        let ar = &ta.data()[i * k..(i + 1) * k];
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for (d, av) in db[j * k..(j + 1) * k].iter_mut().zip(ar) {
                                *d += gv * av;
                            }
                        }
                    }
                    updates.push((b, db));
                }
            }
            &Op::AddBias { x, bias } => {
                if self.rg(x) {
                    updates.push((x, g.to_vec()));
                }
                if self.rg(bias) {
                    let n = self.nodes[bias].value.len();
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                    updates.push((bias, db));
                }
            }
            &Op::Relu { x } => {
                let out = &node.value;
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, y)| if *y > 0.0 { *gv } else { 0.0 })
                    .collect();
                updates.push((x, dx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
                ..
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let n = inv_std.len();
                let m = xhat.len() / n;
                let gam = self.nodes[gamma].value.data();
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..m {
                    for c in 0..n {
                        dgamma[c] += g[r * n + c] * xhat[r * n + c];
                        dbeta[c] += g[r * n + c];
                    }
                }
                if self.rg(x) {
                    let mut dx = vec![0.0; m * n];
                    if *training {
                        let mf = m as f64;
                        for r in 0..m {
                            for c in 0..n {
                                let dxhat = g[r * n + c] * gam[c];
                                let sum_dxhat = dbeta[c] * gam[c];
                                let sum_dxhat_xhat = dgamma[c] * gam[c];
                                dx[r * n + c] = inv_std[c] / mf
                                    * (mf * dxhat - sum_dxhat - xhat[r * n + c] * sum_dxhat_xhat);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for c in 0..n {
                                dx[r * n + c] = g[r * n + c] * gam[c] * inv_std[c];
                            }
                        }
                    }
                    updates.push((x, dx));
                }
                if self.rg(gamma) {
                    updates.push((gamma, dgamma));
                }
                if self.rg(beta) {
                    updates.push((beta, dbeta));
                }
            }
            &Op::MeanPoolRows { x, group } => {
                let n = node.value.cols();
                let m = self.nodes[x].value.rows();
                let mut dx = vec![0.0; m * n];
                let inv = 1.0 / group as f64;
                for r in 0..m {
                    let src = &g[(r / group) * n..(r / group + 1) * n];
                    for (d, s) in dx[r * n..(r + 1) * n].iter_mut().zip(src) {
                        *d = s * inv;
                    }
                }
                updates.push((x, dx));
            }
            &Op::Reshape { x } => updates.push((x, g.to_vec())),
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    updates.push((p, g[offset..offset + len].to_vec()));
                    offset += len;
                }
            }
            &Op::Rows { x, start } => {
                let src = &self.nodes[x].value;
                let n = src.cols();
                let mut dx = vec![0.0; src.len()];
                dx[start * n..start * n + g.len()].copy_from_slice(g);
                updates.push((x, dx));
            }
            Op::L2NormRows { x, norms } => {
                let out = node.value.data();
                let n = node.value.cols();
                let mut dx = vec![0.0; out.len()];
                for (r, &nr) in norms.iter().enumerate() {
                    let (y, gr) = (&out[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let d = &mut dx[r * n..(r + 1) * n];
                    if nr < NORM_FLOOR {
                        d.copy_from_slice(gr);
                    } else {
                        let yg = crate::tensor::dot(y, gr);
                        for ((dv, yv), gv) in d.iter_mut().zip(y).zip(gr) {
                            *dv = (gv - yv * yg) / nr;
                        }
                    }
                }
                updates.push((*x, dx));
            }
            &Op::Dot { a, b } => {
                let s = g[0];
                if self.rg(a) {
                    updates.push((a, self.nodes[b].value.data().iter().map(|v| v * s).collect()));
                }
                if self.rg(b) {
                    updates.push((b, self.nodes[a].value.data().iter().map(|v| v * s).collect()));
                }
            }
            &Op::Scale { x, c } => updates.push((x, g.iter().map(|v| v * c).collect())),
            &Op::Add { a, b } => {
                updates.push((a, g.to_vec()));
                updates.push((b, g.to_vec()));
            }
            &Op::Sub { a, b } => {
                updates.push((a, g.to_vec()));
                updates.push((b, g.iter().map(|v| -v).collect()));
            }
            &Op::Mul { a, b } => {
                let (ta, tb) = (self.nodes[a].value.data(), self.nodes[b].value.data());
                updates.push((a, g.iter().zip(tb).map(|(x, y)| x * y).collect()));
                updates.push((b, g.iter().zip(ta).map(|(x, y)| x * y).collect()));
            }
            &Op::Sum { x } => updates.push((x, vec![g[0]; self.nodes[x].value.len()])),
            &Op::Log { x } => {
                let tx = self.nodes[x].value.data();
                updates.push((x, g.iter().zip(tx).map(|(gv, v)| gv / v).collect()));
            }
            &Op::Exp { x } => {
                let y = node.value.data();
                updates.push((x, g.iter().zip(y).map(|(gv, v)| gv * v).collect()));
            }
            Op::WeightedLogSumExp { x, probs } => {
                updates.push((*x, probs.iter().map(|p| p * g[0]).collect()));
            }
        }
        for (i, u) in updates {
            self.accumulate(i, u);
        }
    }

    /// Gradient of the last backward pass with respect to `v`, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Gradient of the named parameter, reshaped like its value.
    pub fn grad_by_name(&self, name: &str) -> Option<Tensor> {
        let v = self.lookup(name)?;
        let g = self.grad(v)?;
        Tensor::new(self.value(v).shape().to_vec(), g.to_vec()).ok()
    }
}

/// `out [m,n] += a [m,k] @ b [k,n]`.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Central-difference estimate of the gradient of a scalar function.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + step;
        let plus = f(&probe)?;
        probe.data_mut()[k] = orig - step;
        let minus = f(&probe)?;
        probe.data_mut()[k] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::non_finite(format!(
                "finite-difference probe at coordinate {k}"
            )));
        }
        grad[k] = (plus - minus) / (2.0 * step);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, vec![3.0, 4.0]).unwrap());
        let y = g.l2_normalize(x).unwrap();
        let d = g.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mean_pool_all_cells() {
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = g.mean_pool_rows(x, 4).unwrap();
        assert_eq!(g.value(y).data(), &[2.5]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.input(vec_t(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dot_gradient_is_other_operand() {
        let mut g = Graph::new();
        let v = g.param("v", vec_t(&[0.3, -0.2, 0.9]));
        let m = g.input(vec_t(&[1.5, 2.0, -1.0]));
        let loss = g.dot(v, m).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(v).unwrap(), &[1.5, 2.0, -1.0]);
        assert!(g.grad(m).is_none());
    }

    #[test]
    fn normalized_sum_gradient_at_unit_axis() {
        let mut g = Graph::new();
        let v = g.param("v", Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap());
        let y = g.l2_normalize(v).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let an = g.grad(v).unwrap().to_vec();

        let fd = finite_difference_gradient(
            |t| {
                let mut h = Graph::new();
                let v = h.input(t.clone());
                let y = h.l2_normalize(v)?;
                let s = h.sum(y)?;
                Ok(h.value(s).item())
            },
            &Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!((fd.data()[0] - 0.0).abs() < 1e-8);
        assert!((fd.data()[1] - 1.0).abs() < 1e-8);
        assert!((an[0] - 0.0).abs() < 1e-12);
        assert!((an[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_loss_writes_no_gradients() {
        let mut g = Graph::new();
        let c = g.input(Tensor::scalar(4.0));
        let w = g.param("w", Tensor::scalar(1.0));
        let loss = g.scale(c, 2.0).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar() {
        let mut g = Graph::new();
        let x = g.param("x", vec_t(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
        assert!(matches!(g.backward(Var(99)), Err(Error::NotEvaluated(99))));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
        let err = g.mean_pool_rows(a, 3).unwrap_err().to_string();
        assert!(err.contains("mean_pool_rows"), "{err}");
    }

    #[test]
    fn floor_guard_passes_zero_rows_through() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3]));
        let y = g.l2_normalize(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 6]);
        assert_eq!(g.norm_floor_hits(), 2);
    }

    #[test]
    fn fd_examples() {
        let x = vec_t(&[1.0, 2.0]);
        let fd = finite_difference_gradient(|t| Ok(t.data().iter().map(|v| v * v).sum()), &x, 1e-5)
            .unwrap();
        assert!((fd.data()[0] - 2.0).abs() < 1e-8 && (fd.data()[1] - 4.0).abs() < 1e-8);
        let fd = finite_difference_gradient(|t| Ok(0.5 * t.data()[0] + 0.5 * t.data()[1]), &x, 1e-5)
            .unwrap();
        assert!((fd.data()[0] - 0.5).abs() < 1e-9 && (fd.data()[1] - 0.5).abs() < 1e-9);
        assert!(finite_difference_gradient(|_| Ok(f64::NAN), &x, 1e-5).is_err());
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
