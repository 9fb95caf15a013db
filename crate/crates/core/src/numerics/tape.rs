//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every forward operation appends a node to the [`Tape`]; the returned
//! [`Var`] is an index into it. Because a node can only reference earlier
//! nodes, walking the list backwards is a topological order and visits each
//! node exactly once. Parameter leaves read their values from a borrowed
//! [`ParamStore`] and deposit gradients straight into a [`Gradients`] buffer.

use super::params::{Gradients, ParamId, ParamStore, RunningUpdate};
use super::tensor::gemm;
use super::{NumericsError, Rng, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            // y > 0 iff x > 0, so the subgradient at 0 is 0.
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Per-column statistics of the current batch; records a running update.
    Batch,
    /// Stored running statistics, treated as constants.
    Running,
}

/// Parameter handles of one batch-norm layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchNormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;
pub const BCE_CLIP: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Act(Var, Activation),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    RepeatRows(Var),
    GatherRows(Var, Vec<usize>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        x_hat: Tensor,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Sum(Var),
    Mean(Var),
    SoftmaxXent {
        logits: Var,
        probs: Tensor,
        targets: Vec<usize>,
    },
    Bce {
        probs: Var,
        labels: Vec<f64>,
        pos_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    running_updates: Vec<RunningUpdate>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            running_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.value(id),
            _ => node.value.as_ref().expect("non-parameter node holds a value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch statistics gathered by train-mode batch-norm nodes so far.
    pub fn take_running_updates(&mut self) -> Vec<RunningUpdate> {
        std::mem::take(&mut self.running_updates)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.params.is_trainable(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = Tensor::zeros(m, n);
        gemm(m, k, n, av.data(), false, bv.data(), false, out.data_mut(), false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `x + b` with the `1 x k` row `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(self.mismatch("add_row", x, b));
        }
        let mut out = xv.clone();
        let cols = out.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += bv.data()[i % cols];
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    /// `x W + b`: the dense layer used everywhere.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != wv.rows() {
            return Err(self.mismatch("affine", x, w));
        }
        if bv.rows() != 1 || bv.cols() != wv.cols() {
            return Err(self.mismatch("affine", w, b));
        }
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    fn zip(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_dims(bv) {
            return Err(self.mismatch(name, a, b));
        }
        let mut out = av.clone();
        for (o, &y) in out.data_mut().iter_mut().zip(bv.data()) {
            *o = f(*o, y);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Element-wise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if !av.same_dims(&c) {
            return Err(NumericsError::ShapeMismatch {
                op: "mul_const",
                left: av.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let mut out = av.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= m;
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let out = self.value(a).map(|v| kind.apply(v));
        let rg = self.rg(&[a]);
        self.push(out, Op::Act(a, kind), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Tanh)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
        }
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
            data.extend_from_slice(v.data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::matrix(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if start + len > av.rows() {
            return Err(NumericsError::IndexOutOfRange {
                index: start + len,
                bound: av.rows(),
            });
        }
        let cols = av.cols();
        let out = Tensor::matrix(len, cols, av.data()[start * cols..(start + len) * cols].to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Tile a `1 x k` row into `n x k`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var, NumericsError> {
        let av = self.value(a);
        if av.rows() != 1 {
            return Err(NumericsError::Contract(format!(
                "repeat_rows expects a single row, got shape {:?}",
                av.shape()
            )));
        }
        let mut data = Vec::with_capacity(n * av.cols());
        for _ in 0..n {
            data.extend_from_slice(av.data());
        }
        let out = Tensor::matrix(n, av.cols(), data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::RepeatRows(a), rg))
    }

    /// Rows `indices` of `table` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= tv.rows() {
                return Err(NumericsError::IndexOutOfRange {
                    index: i,
                    bound: tv.rows(),
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        let out = Tensor::matrix(indices.len(), cols, data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows(table, indices.to_vec()), rg))
    }

    /// Inverted dropout. `rng = None` is inference mode (identity).
    pub fn dropout(&mut self, x: Var, p: f64, rng: Option<&mut Rng>) -> Result<Var, NumericsError> {
        check_dropout_rate(p)?;
        match rng {
            Some(rng) if p > 0.0 => {
                let shape = self.value(x);
                let mask = dropout_mask(shape.rows(), shape.cols(), p, rng);
                self.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    pub fn batch_norm(&mut self, x: Var, ids: &BatchNormIds, mode: BnMode) -> Result<Var, NumericsError> {
        let gamma = self.param(ids.gamma);
        let beta = self.param(ids.beta);
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        for (id, what) in [(gamma, "gamma"), (beta, "beta")] {
            let v = self.value(id);
            if v.rows() != 1 || v.cols() != d {
                return Err(NumericsError::ShapeMismatch {
                    op: what,
                    left: xv.shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
        }
        let (mean, var) = match mode {
            BnMode::Batch => {
                if n < 2 {
                    return Err(NumericsError::Contract(format!(
                        "batch norm in batch-statistics mode needs at least 2 rows, got {n}"
                    )));
                }
                let (mean, var) = column_moments(xv);
                self.running_updates.push(RunningUpdate {
                    mean: ids.running_mean,
                    var: ids.running_var,
                    batch_mean: mean.clone(),
                    batch_var: var.clone(),
                });
                (mean, var)
            }
            BnMode::Running => (
                self.params.value(ids.running_mean).data().to_vec(),
                self.params.value(ids.running_var).data().to_vec(),
            ),
        };
        let xv = self.value(x);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut x_hat = Tensor::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                x_hat.set(r, c, (xv.get(r, c) - mean[c]) * inv_std[c]);
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = x_hat.clone();
        for r in 0..n {
            for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                *v = g[c] * *v + b[c];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats: mode == BnMode::Batch,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::full(1, 1, s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.sum() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::full(1, 1, s), Op::Mean(a), rg)
    }

    /// Mean over rows of `-log softmax(logits_row)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if targets.len() != n {
            return Err(NumericsError::Contract(format!(
                "{} targets for {n} logit rows",
                targets.len()
            )));
        }
        let mut probs = Tensor::zeros(n, c);
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumericsError::IndexOutOfRange { index: t, bound: c });
            }
            let row = lv.row(r);
            let (lse, p) = log_softmax_parts(row);
            probs.row_mut(r).copy_from_slice(&p);
            loss += lse - row[t];
        }
        let out = Tensor::full(1, 1, loss / n.max(1) as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::SoftmaxXent {
                logits,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities against {0,1} labels.
    /// Positive terms are multiplied by `pos_weight`.
    pub fn binary_cross_entropy(
        &mut self,
        probs: Var,
        labels: &[f64],
        pos_weight: f64,
    ) -> Result<Var, NumericsError> {
        let pv = self.value(probs);
        if pv.len() != labels.len() {
            return Err(NumericsError::Contract(format!(
                "{} labels for {} probabilities",
                labels.len(),
                pv.len()
            )));
        }
        let total: f64 = pv
            .data()
            .iter()
            .zip(labels)
            .map(|(&p, &y)| weighted_bce(p, y, pos_weight))
            .sum();
        let out = Tensor::full(1, 1, total / labels.len().max(1) as f64);
        let rg = self.rg(&[probs]);
        Ok(self.push(
            out,
            Op::Bce {
                probs,
                labels: labels.to_vec(),
                pos_weight,
            },
            rg,
        ))
    }

    /// Accumulate d(root)/d(param) into `grads` for every reachable trainable
    /// parameter. Calling it again without zeroing `grads` adds on top.
    pub fn backward(&self, root: Var, grads: &mut Gradients) -> Result<(), NumericsError> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut node_grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        node_grads[root.0] = Some(Tensor::full(1, 1, 1.0));
        let mut sink = Sink {
            nodes: &self.nodes,
            node_grads: &mut node_grads,
            param_grads: grads,
        };
        for i in (0..=root.0).rev() {
            let Some(g) = sink.node_grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut sink);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, sink: &mut Sink<'_>) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => sink.param_grads.get_mut(*id).add_assign(g),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                sink.with(*a, |buf| gemm(m, n, k, g.data(), false, bv.data(), true, buf, true));
                sink.with(*b, |buf| gemm(k, m, n, av.data(), true, g.data(), false, buf, true));
            }
            Op::AddRow(x, b) => {
                sink.with(*x, |buf| add_into(buf, g.data()));
                let cols = g.cols();
                sink.with(*b, |buf| {
                    for (j, v) in g.data().iter().enumerate() {
                        buf[j % cols] += v;
                    }
                });
            }
            Op::Add(a, b) => {
                sink.with(*a, |buf| add_into(buf, g.data()));
                sink.with(*b, |buf| add_into(buf, g.data()));
            }
            Op::Sub(a, b) => {
                sink.with(*a, |buf| add_into(buf, g.data()));
                sink.with(*b, |buf| {
                    for (o, v) in buf.iter_mut().zip(g.data()) {
                        *o -= v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                sink.with(*a, |buf| mul_add_into(buf, g.data(), bv.data()));
                sink.with(*b, |buf| mul_add_into(buf, g.data(), av.data()));
            }
            Op::MulConst(a, c) => sink.with(*a, |buf| mul_add_into(buf, g.data(), c.data())),
            Op::Scale(a, s) => sink.with(*a, |buf| {
                for (o, v) in buf.iter_mut().zip(g.data()) {
                    *o += s * v;
                }
            }),
            Op::Act(a, kind) => {
                let y = node.value.as_ref().expect("activation value");
                sink.with(*a, |buf| {
                    for ((o, gv), yv) in buf.iter_mut().zip(g.data()).zip(y.data()) {
                        *o += gv * kind.derivative_from_output(*yv);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    sink.with(p, |buf| {
                        for r in 0..rows {
                            let src = &g.row(r)[offset..offset + w];
                            add_into(&mut buf[r * w..(r + 1) * w], src);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    sink.with(p, |buf| add_into(buf, &g.data()[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = g.cols();
                let begin = start * cols;
                sink.with(*a, |buf| add_into(&mut buf[begin..begin + g.len()], g.data()));
            }
            Op::RepeatRows(a) => {
                let cols = g.cols();
                sink.with(*a, |buf| {
                    for r in 0..g.rows() {
                        add_into(buf, &g.data()[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::GatherRows(table, indices) => {
                let cols = g.cols();
                sink.with(*table, |buf| {
                    for (r, &idx) in indices.iter().enumerate() {
                        add_into(&mut buf[idx * cols..(idx + 1) * cols], g.row(r));
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let (n, d) = (g.rows(), g.cols());
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        dgamma[c] += g.get(r, c) * x_hat.get(r, c);
                        dbeta[c] += g.get(r, c);
                    }
                }
                let gv = self.value(*gamma).data();
                sink.with(*x, |buf| {
                    let nf = n as f64;
                    for r in 0..n {
                        for c in 0..d {
                            let scale = gv[c] * inv_std[c];
                            let dy = g.get(r, c);
                            buf[r * d + c] += if *batch_stats {
                                scale * (dy - dbeta[c] / nf - x_hat.get(r, c) * dgamma[c] / nf)
                            } else {
                                scale * dy
                            };
                        }
                    }
                });
                sink.with(*gamma, |buf| add_into(buf, &dgamma));
                sink.with(*beta, |buf| add_into(buf, &dbeta));
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                sink.with(*a, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let s = g.data()[0] / self.value(*a).len().max(1) as f64;
                sink.with(*a, |buf| buf.iter_mut().for_each(|o| *o += s));
            }
            Op::SoftmaxXent {
                logits,
                probs,
                targets,
            } => {
                let n = targets.len().max(1) as f64;
                let s = g.data()[0] / n;
                let c = probs.cols();
                sink.with(*logits, |buf| {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            buf[r * c + j] += s * (probs.get(r, j) - onehot);
                        }
                    }
                });
            }
            Op::Bce {
                probs,
                labels,
                pos_weight,
            } => {
                let pv = self.value(*probs);
                let s = g.data()[0] / labels.len().max(1) as f64;
                sink.with(*probs, |buf| {
                    for ((o, &p), &y) in buf.iter_mut().zip(pv.data()).zip(labels) {
                        *o += s * weighted_bce_grad(p, y, *pos_weight);
                    }
                });
            }
        }
    }
}

/// Routes gradient contributions either into a parameter's buffer or into a
/// lazily allocated per-node buffer.
struct Sink<'a> {
    nodes: &'a [Node],
    node_grads: &'a mut [Option<Tensor>],
    param_grads: &'a mut Gradients,
}

impl Sink<'_> {
    fn with(&mut self, target: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match node.op {
            Op::Param(id) => f(self.param_grads.get_mut(id).data_mut()),
            _ => {
                let slot = &mut self.node_grads[target.0];
                let buf = slot.get_or_insert_with(|| {
                    let v = node.value.as_ref().expect("node value");
                    let mut z = v.clone();
                    z.fill(0.0);
                    z
                });
                f(buf.data_mut());
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn mul_add_into(dst: &mut [f64], a: &[f64], b: &[f64]) {
    for ((d, x), y) in dst.iter_mut().zip(a).zip(b) {
        *d += x * y;
    }
}

fn column_moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let nf = n as f64;
    let mut mean = vec![0.0; d];
    for r in 0..n {
        add_into(&mut mean, x.row(r));
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![0.0; d];
    for r in 0..n {
        for (c, v) in x.row(r).iter().enumerate() {
            let dev = v - mean[c];
            var[c] += dev * dev;
        }
    }
    var.iter_mut().for_each(|v| *v /= nf);
    (mean, var)
}

/// (log-sum-exp, softmax) of one row, stabilized by max subtraction.
pub(crate) fn log_softmax_parts(row: &[f64]) -> (f64, Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    (max + z.ln(), exps.into_iter().map(|e| e / z).collect())
}

pub(crate) fn weighted_bce(p: f64, y: f64, pos_weight: f64) -> f64 {
    let pc = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
    -pos_weight * y * pc.ln() - (1.0 - y) * (1.0 - pc).ln()
}

fn weighted_bce_grad(p: f64, y: f64, pos_weight: f64) -> f64 {
    if !(BCE_CLIP..=1.0 - BCE_CLIP).contains(&p) {
        return 0.0;
    }
    -pos_weight * y / p + (1.0 - y) / (1.0 - p)
}

pub(crate) fn check_dropout_rate(p: f64) -> Result<(), NumericsError> {
    if !(0.0..1.0).contains(&p) {
        return Err(NumericsError::Contract(format!(
            "dropout rate must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

pub(crate) fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let mut mask = Tensor::zeros(rows, cols);
    for m in mask.data_mut() {
        *m = if rng.uniform() < p { 0.0 } else { keep };
    }
    mask
}
