use super::tensor::{gemm, Operand, Tensor};
use crate::error::{Error, Result};

/// Exponential-moving-average weight kept on the old running statistic.
pub const BN_MOMENTUM: f64 = 0.9;
/// Added to the variance before taking the square root in batch norm.
pub const BN_EPS: f64 = 1e-8;
/// Probabilities are clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` inside losses.
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether batch norm uses batch statistics (and updates running ones) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(width: usize) -> Self {
        RunningStats {
            mean: vec![0.0; width],
            var: vec![1.0; width],
        }
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Abs(Var),
    Scale(Var, f64),
    GradReverse(Var, f64),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    CrossEntropy(Var, Vec<usize>),
    BinaryCrossEntropy(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of operations recorded during one forward pass.
///
/// Nodes only refer to earlier nodes, so insertion order is a topological
/// order and backward walks it in reverse.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the loss with respect to `var`, or `None` when the node
    /// does not influence the loss through differentiable paths.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant leaf; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a 1 x n bias row to every row of an m x n input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Shape {
                op: "add_bias",
                left: xv.shape(),
                right: bv.shape(),
            });
        }
        let mut out = xv.clone();
        let b = bv.data();
        for row in out.values_mut().chunks_exact_mut(b.len().max(1)) {
            for (o, bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                left: sa,
                right: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.values_mut().iter_mut().zip(self.value(b).data()) {
            *o -= v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(stable_sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax, computed after subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let cols = xv.cols().max(1);
        for row in out.values_mut().chunks_exact_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Identity on the forward pass; multiplies the incoming gradient by
    /// `-lambda` on the backward pass.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Param(format!(
                "gradient reversal weight must be finite and >= 0, got {lambda}"
            )));
        }
        let out = self.value(x).clone();
        let rg = self.rg(x);
        Ok(self.push(out, Op::GradReverse(x, lambda), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Tensor::scalar(xv.sum() / xv.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(out, Op::Mean(x), rg)
    }

    /// Stacks inputs with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Graph("concat_rows of nothing".into()));
        };
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.value(first).shape(),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::new(rows, cols, data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::Graph(format!(
                "row slice {start}..{end} out of range for {} rows",
                xv.rows()
            )));
        }
        let cols = xv.cols();
        let out = Tensor::new(
            end - start,
            cols,
            xv.data()[start * cols..end * cols].to_vec(),
        )?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SliceRows(x, start), rg))
    }

    /// Batch normalization over rows with learnable per-column scale and
    /// shift (`gamma`, `beta`, each 1 x n).
    ///
    /// In train mode the batch statistics are used and folded into `stats`
    /// with momentum [`BN_MOMENTUM`]; eval mode reads `stats` only.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (m, n) = xv.shape();
        for (p, name) in [(gamma, "batch_norm gamma"), (beta, "batch_norm beta")] {
            if self.value(p).shape() != (1, n) {
                return Err(Error::Shape {
                    op: name,
                    left: xv.shape(),
                    right: self.value(p).shape(),
                });
            }
        }
        if stats.width() != n {
            return Err(Error::Shape {
                op: "batch_norm stats",
                left: xv.shape(),
                right: (1, stats.width()),
            });
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::Param(format!(
                        "batch norm in train mode needs at least 2 rows, got {m}"
                    )));
                }
                let mut mean = vec![0.0; n];
                for row in xv.data().chunks_exact(n) {
                    for (acc, v) in mean.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut var = vec![0.0; n];
                for row in xv.data().chunks_exact(n) {
                    for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *acc += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                for j in 0..n {
                    stats.mean[j] = BN_MOMENTUM * stats.mean[j] + (1.0 - BN_MOMENTUM) * mean[j];
                    stats.var[j] = BN_MOMENTUM * stats.var[j] + (1.0 - BN_MOMENTUM) * var[j];
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = xv.clone();
        for row in x_hat.values_mut().chunks_exact_mut(n.max(1)) {
            for j in 0..n {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = x_hat.clone();
        for row in out.values_mut().chunks_exact_mut(n.max(1)) {
            for j in 0..n {
                row[j] = g[j] * row[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
            rg,
        ))
    }

    /// Mean of `-ln p[label]` over rows, with `p` clamped below at
    /// [`LOG_CLAMP`].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let pv = self.value(probs);
        if labels.len() != pv.rows() || pv.rows() == 0 {
            return Err(Error::Data(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                pv.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= pv.cols()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                pv.cols()
            )));
        }
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -pv.get(i, l).max(LOG_CLAMP).ln())
            .sum();
        let out = Tensor::scalar(total / labels.len() as f64);
        let rg = self.rg(probs);
        Ok(self.push(out, Op::CrossEntropy(probs, labels.to_vec()), rg))
    }

    /// Mean binary cross-entropy of an m x 1 probability column against
    /// 0/1 targets.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[f64]) -> Result<Var> {
        let pv = self.value(probs);
        if pv.cols() != 1 || targets.len() != pv.rows() || pv.rows() == 0 {
            return Err(Error::Shape {
                op: "binary_cross_entropy",
                left: pv.shape(),
                right: (targets.len(), 1),
            });
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &t)| {
                let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum();
        let out = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(probs);
        Ok(self.push(out, Op::BinaryCrossEntropy(probs, targets.to_vec()), rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Node accumulators start at zero on every call, so calling this twice
    /// on the same graph yields identical results.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &dy, &mut grads);
            }
            grads[idx] = Some(dy);
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut send = |v: Var, g: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    gemm(Operand::plain(dy), Operand::transposed(bv), &mut da);
                    send(*a, da);
                }
                if self.rg(*b) {
                    let mut db = Tensor::zeros(bv.rows(), bv.cols());
                    gemm(Operand::transposed(av), Operand::plain(dy), &mut db);
                    send(*b, db);
                }
            }
            Op::AddBias(x, b) => {
                if self.rg(*b) {
                    send(*b, dy.column_sums());
                }
                send(*x, dy.clone());
            }
            Op::Add(a, b) => {
                send(*a, dy.clone());
                send(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                send(*a, dy.clone());
                if self.rg(*b) {
                    send(*b, dy.map(|v| -v));
                }
            }
            Op::Relu(x) => {
                let mut dx = dy.clone();
                for (d, &xv) in dx.values_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                send(*x, dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = dy.clone();
                for (d, &y) in dx.values_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (1.0 - y);
                }
                send(*x, dx);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols().max(1);
                let mut dx = dy.clone();
                for (drow, yrow) in dx
                    .values_mut()
                    .chunks_exact_mut(cols)
                    .zip(y.data().chunks_exact(cols))
                {
                    let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                    for (d, &yy) in drow.iter_mut().zip(yrow) {
                        *d = yy * (*d - dot);
                    }
                }
                send(*x, dx);
            }
            Op::Abs(x) => {
                let mut dx = dy.clone();
                for (d, &xv) in dx.values_mut().iter_mut().zip(self.value(*x).data()) {
                    *d *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                send(*x, dx);
            }
            Op::Scale(x, f) => send(*x, dy.map(|v| v * f)),
            Op::GradReverse(x, lambda) => send(*x, dy.map(|v| -lambda * v)),
            Op::Sum(x) => {
                let (r, c) = self.value(*x).shape();
                send(*x, Tensor::filled(r, c, dy.data()[0]));
            }
            Op::Mean(x) => {
                let (r, c) = self.value(*x).shape();
                let scale = dy.data()[0] / (r * c).max(1) as f64;
                send(*x, Tensor::filled(r, c, scale));
            }
            Op::ConcatRows(parts) => {
                let cols = dy.cols();
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        let chunk = dy.data()[offset * cols..(offset + rows) * cols].to_vec();
                        send(p, Tensor::new(rows, cols, chunk).expect("slice shape"));
                    }
                    offset += rows;
                }
            }
            Op::SliceRows(x, start) => {
                let (r, c) = self.value(*x).shape();
                let mut dx = Tensor::zeros(r, c);
                dx.values_mut()[start * c..start * c + dy.len()].copy_from_slice(dy.data());
                send(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let (m, n) = dy.shape();
                if self.rg(*beta) {
                    send(*beta, dy.column_sums());
                }
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; n];
                    for (drow, hrow) in dy.data().chunks_exact(n).zip(x_hat.data().chunks_exact(n))
                    {
                        for j in 0..n {
                            dg[j] += drow[j] * hrow[j];
                        }
                    }
                    send(*gamma, Tensor::new(1, n, dg).expect("gamma grad"));
                }
                if self.rg(*x) {
                    let g = self.value(*gamma).data();
                    let mut dx = Tensor::zeros(m, n);
                    if *batch_stats {
                        let mut sum_d = vec![0.0; n];
                        let mut sum_dh = vec![0.0; n];
                        for (drow, hrow) in
                            dy.data().chunks_exact(n).zip(x_hat.data().chunks_exact(n))
                        {
                            for j in 0..n {
                                let dh = drow[j] * g[j];
                                sum_d[j] += dh;
                                sum_dh[j] += dh * hrow[j];
                            }
                        }
                        let mf = m as f64;
                        for ((out, drow), hrow) in dx
                            .values_mut()
                            .chunks_exact_mut(n)
                            .zip(dy.data().chunks_exact(n))
                            .zip(x_hat.data().chunks_exact(n))
                        {
                            for j in 0..n {
                                let dh = drow[j] * g[j];
                                out[j] =
                                    inv_std[j] / mf * (mf * dh - sum_d[j] - hrow[j] * sum_dh[j]);
                            }
                        }
                    } else {
                        for (out, drow) in dx
                            .values_mut()
                            .chunks_exact_mut(n)
                            .zip(dy.data().chunks_exact(n))
                        {
                            for j in 0..n {
                                out[j] = drow[j] * g[j] * inv_std[j];
                            }
                        }
                    }
                    send(*x, dx);
                }
            }
            Op::CrossEntropy(probs, labels) => {
                let pv = self.value(*probs);
                let scale = dy.data()[0] / labels.len() as f64;
                let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                let cols = pv.cols();
                for (i, &l) in labels.iter().enumerate() {
                    dp.values_mut()[i * cols + l] = -scale / pv.get(i, l).max(LOG_CLAMP);
                }
                send(*probs, dp);
            }
            Op::BinaryCrossEntropy(probs, targets) => {
                let pv = self.value(*probs);
                let scale = dy.data()[0] / targets.len() as f64;
                let data = pv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&p, &t)| {
                        let p = p.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
                        scale * (-t / p + (1.0 - t) / (1.0 - p))
                    })
                    .collect();
                send(*probs, Tensor::new(pv.rows(), 1, data).expect("bce grad"));
            }
        }
    }
}

pub(crate) fn stable_sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
