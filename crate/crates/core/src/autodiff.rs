//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node to the [`Tape`]; node indices are therefore
//! already in topological order and `backward` simply walks them in reverse.
//! Leaves created with [`Tape::param`] accumulate gradients across repeated
//! `backward` calls until [`Tape::zero_grad`] is called. Leaves created with
//! [`Tape::constant`] never receive gradients, and operations whose inputs are
//! all constant skip their backward rule entirely.

use thiserror::Error;

use crate::tensor::{axis_split, Tensor};

/// Probabilities below this value are clamped before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: {reason}")]
    Invalid { op: &'static str, reason: String },
    #[error("{op}: mask selects no positions")]
    EmptyMask { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
}

type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }
}

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::Invalid { op, reason: reason.into() }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range of one sequence inside a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

/// Post-softmax attention weights saved by [`Tape::causal_attention`].
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub spans: Vec<Span>,
    pub n_heads: usize,
    /// `probs[span * n_heads + head]` is a row-major `len × len` matrix.
    pub probs: Vec<Vec<f64>>,
}

impl AttentionWeights {
    pub fn block(&self, span: usize, head: usize) -> &[f64] {
        &self.probs[span * self.n_heads + head]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    MaskedFill { x: Var, mask: Vec<bool> },
    Concat { inputs: Vec<Var>, axis: usize },
    MaskedMeanRows { x: Var, mask: Vec<bool>, count: usize },
    Gelu(Var),
    Tanh(Var),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    Select { x: Var, idx: Vec<usize> },
    Attention { qkv: Var, weights: AttentionWeights },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize, probs: Vec<f64> },
    KlDiv { q: Var, p: Vec<f64>, s: Vec<f64>, mask: Vec<bool>, count: usize, temperature: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// The computation record: values, operations and backward rules.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Attention weights recorded by a `causal_attention` node.
    pub fn attention_weights(&self, v: Var) -> Option<&AttentionWeights> {
        match &self.nodes[v.0].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.value(v).shape() {
            [r, c] => Ok((r, c)),
            ref s => Err(invalid(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    // ----- forward operations -------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m, k, n, 1.0,
            self.value(a).data(), k as isize, 1,
            self.value(b).data(), n as isize, 1,
            0.0, &mut out, n as isize, 1,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| x * factor).collect());
        let rg = self.rg(&[a]);
        self.push(t, Op::Scale(a, factor), rg)
    }

    /// Adds a `[C]` bias to every row of a `[.., C]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape().len() != 1 || tb.numel() != tx.cols() || tx.shape().is_empty() {
            return Err(mismatch("add_bias", tx.shape(), tb.shape()));
        }
        let c = tb.numel();
        let data = tx.data().iter().enumerate().map(|(i, v)| v + tb.data()[i % c]).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(t, Op::AddBias(x, bias), rg))
    }

    /// Gathers rows of a `[V × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(invalid("embedding", "no ids given"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(invalid("embedding", format!("id {bad} out of range for {v} rows")));
        }
        let tt = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tt[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Row-wise layer normalization of a `[R × C]` matrix.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [c] {
                return Err(mismatch("layer_norm", self.value(x).shape(), self.value(p).shape()));
            }
        }
        let (tx, g, b) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &tx[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let nd = self.value(x).shape().len();
        if axis >= nd {
            return Err(invalid(op, format!("axis {axis} out of range for rank {nd}")));
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let t = softmax_along(self.value(x), axis, false);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let t = softmax_along(self.value(x), axis, true);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    /// Replaces entries where `mask` is true by `value`.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.numel() {
            return Err(mismatch("masked_fill", tx.shape(), &[mask.len()]));
        }
        let data = tx.data().iter().zip(mask).map(|(&v, &m)| if m { value } else { v }).collect();
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MaskedFill { x, mask: mask.to_vec() }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.value(*first).shape().to_vec();
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Mean over the rows (leading axis) selected by `mask`.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.value(x);
        let p = tx.rows();
        if tx.shape().is_empty() || mask.len() != p {
            return Err(mismatch("masked_mean_rows", tx.shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask { op: "masked_mean_rows" });
        }
        let c = tx.numel() / p;
        let mut out = vec![0.0; c];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for j in 0..c {
                out[j] += tx.data()[i * c + j];
            }
        }
        for o in &mut out {
            *o /= count as f64;
        }
        let shape = tx.shape()[1..].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaskedMeanRows { x, mask: mask.to_vec(), count },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|&v| gelu(v)).collect());
        let rg = self.rg(&[x]);
        self.push(t, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let t = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v.tanh()).collect());
        let rg = self.rg(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(t, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let tx = self.value(x).data();
        let data = (0..r * c).map(|i| tx[(i % r) * c + i / r]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), Op::Transpose(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(invalid("slice_cols", format!("columns {start}..{} out of 0..{c}", start + len)));
        }
        let tx = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&tx[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { x, start }, rg))
    }

    /// Picks `x[p, idx[p]]` from a `[P × V]` matrix, giving `[P]`.
    pub fn select(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (p, v) = self.matrix_dims("select", x)?;
        if idx.len() != p {
            return Err(mismatch("select", self.value(x).shape(), &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(invalid("select", format!("index {bad} out of range for {v} columns")));
        }
        let tx = self.value(x).data();
        let data = idx.iter().enumerate().map(|(r, &i)| tx[r * v + i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![p], data), Op::Select { x, idx: idx.to_vec() }, rg))
    }

    /// Multi-head causal self-attention over sequences packed row-wise.
    ///
    /// `qkv` is `[N × 3d]` holding queries, keys and values side by side;
    /// `spans` partition the N rows into independent sequences. The output is
    /// `[N × d]`. Post-softmax weights are kept on the node for inspection.
    pub fn causal_attention(&mut self, qkv: Var, spans: &[Span], n_heads: usize) -> Result<Var> {
        let (n, three_d) = self.matrix_dims("causal_attention", qkv)?;
        if n_heads == 0 || three_d % (3 * n_heads) != 0 {
            return Err(invalid(
                "causal_attention",
                format!("width {three_d} is not 3 × a multiple of {n_heads} heads"),
            ));
        }
        let covered: usize = spans.iter().map(|s| s.len).sum();
        let contiguous = spans.iter().try_fold(0, |at, s| (s.start == at && s.len > 0).then_some(at + s.len));
        if covered != n || contiguous != Some(n) {
            return Err(invalid("causal_attention", format!("spans do not tile {n} rows")));
        }
        let d = three_d / 3;
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(spans.len() * n_heads);
        for s in spans {
            let l = s.len;
            let base = s.start * three_d;
            for h in 0..n_heads {
                let mut p = vec![0.0; l * l];
                // scores = Q Kᵀ
                gemm(
                    l, dh, l, scale,
                    &src[base + h * dh..], three_d as isize, 1,
                    &src[base + d + h * dh..], 1, three_d as isize,
                    0.0, &mut p, l as isize, 1,
                );
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    let m = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in &mut row[..=i] {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in &mut row[..=i] {
                        *v /= z;
                    }
                    for v in &mut row[i + 1..] {
                        *v = 0.0;
                    }
                }
                gemm(
                    l, l, dh, 1.0,
                    &p, l as isize, 1,
                    &src[base + 2 * d + h * dh..], three_d as isize, 1,
                    0.0, &mut out[s.start * d + h * dh..], d as isize, 1,
                );
                probs.push(p);
            }
        }
        let weights = AttentionWeights { spans: spans.to_vec(), n_heads, probs };
        let rg = self.rg(&[qkv]);
        Ok(self.push(Tensor::from_parts(vec![n, d], out), Op::Attention { qkv, weights }, rg))
    }

    /// Mean over masked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (p, v) = self.matrix_dims("cross_entropy", logits)?;
        if v < 2 {
            return Err(invalid("cross_entropy", "vocabulary must have at least 2 entries"));
        }
        if targets.len() != p || mask.len() != p {
            return Err(mismatch("cross_entropy", self.value(logits).shape(), &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask { op: "cross_entropy" });
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= v) {
            return Err(invalid("cross_entropy", format!("target {bad} out of range for {v} classes")));
        }
        let probs = softmax_along(self.value(logits), 1, false).into_data();
        let mut loss = 0.0;
        for r in (0..p).filter(|&r| mask[r]) {
            let lp = log_softmax_row(&self.value(logits).data()[r * v..(r + 1) * v]);
            loss -= lp[targets[r]];
        }
        let t = Tensor::scalar(loss / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), count, probs },
            rg,
        ))
    }

    /// Mean over masked rows of `KL(softmax(p/τ) ‖ softmax(q/τ))`, times τ² when τ ≠ 1.
    ///
    /// `p_logits` is read as a constant: no gradient ever flows into it.
    pub fn kl_divergence(&mut self, p_logits: Var, q_logits: Var, mask: &[bool], temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(TensorError::NonPositiveTemperature(temperature));
        }
        let (rows, v) = self.matrix_dims("kl_divergence", q_logits)?;
        if self.value(p_logits).shape() != self.value(q_logits).shape() {
            return Err(mismatch("kl_divergence", self.value(p_logits).shape(), self.value(q_logits).shape()));
        }
        if mask.len() != rows {
            return Err(mismatch("kl_divergence", self.value(q_logits).shape(), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::EmptyMask { op: "kl_divergence" });
        }
        let inv_t = 1.0 / temperature;
        let pt = self.value(p_logits).data().iter().map(|x| x * inv_t).collect::<Vec<_>>();
        let qt = self.value(q_logits).data().iter().map(|x| x * inv_t).collect::<Vec<_>>();
        let p = softmax_along(&Tensor::from_parts(vec![rows, v], pt), 1, false).into_data();
        let qt = Tensor::from_parts(vec![rows, v], qt);
        let s = softmax_along(&qt, 1, false).into_data();
        let mut total = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            let lq = log_softmax_row(&qt.data()[r * v..(r + 1) * v]);
            for j in 0..v {
                let pj = p[r * v + j];
                if pj > 0.0 {
                    total += pj * (pj.max(LOG_CLAMP).ln() - lq[j]);
                }
            }
        }
        let factor = if temperature == 1.0 { 1.0 } else { temperature * temperature };
        let t = Tensor::scalar(factor * total / count as f64);
        let rg = self.rg(&[q_logits]);
        Ok(self.push(
            t,
            Op::KlDiv { q: q_logits, p, s, mask: mask.to_vec(), count, temperature },
            rg,
        ))
    }

    // ----- reverse pass --------------------------------------------------

    /// Propagates gradients from a scalar `loss` into every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(&shape));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, t: Tensor| {
            if self.nodes[v.0].requires_grad {
                match &mut grads[v.0] {
                    Some(a) => a.add_assign(&t),
                    slot => *slot = Some(t),
                }
            }
        };
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let gd = g.data();
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by backward"),
            &Op::MatMul(a, b) => {
                let ta = self.value(a);
                let tb = self.value(b);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if want(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, 1.0, gd, n as isize, 1, tb.data(), 1, n as isize, 0.0, &mut da, k as isize, 1);
                    acc(a, Tensor::from_parts(vec![m, k], da));
                }
                if want(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, 1.0, ta.data(), 1, k as isize, gd, n as isize, 1, 0.0, &mut db, n as isize, 1);
                    acc(b, Tensor::from_parts(vec![k, n], db));
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Sub(a, b) => {
                acc(a, g.clone());
                acc(b, map(g, |x| -x));
            }
            &Op::Mul(a, b) => {
                if want(a) {
                    acc(a, zip(g, self.value(b), |x, y| x * y));
                }
                if want(b) {
                    acc(b, zip(g, self.value(a), |x, y| x * y));
                }
            }
            &Op::Scale(a, f) => acc(a, map(g, |x| x * f)),
            &Op::AddBias(x, b) => {
                acc(x, g.clone());
                if want(b) {
                    let c = self.value(b).numel();
                    let mut db = vec![0.0; c];
                    for (j, v) in gd.iter().enumerate() {
                        db[j % c] += v;
                    }
                    acc(b, Tensor::from_parts(vec![c], db));
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gd[r * d + j];
                    }
                }
                acc(*table, Tensor::from_parts(tt.shape().to_vec(), dt));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).numel();
                let r = rstd.len();
                let gam = self.value(*gamma).data();
                if want(*x) {
                    let mut dx = vec![0.0; r * c];
                    for i in 0..r {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dxh = gd[i * c + j] * gam[j];
                            s1 += dxh;
                            s2 += dxh * xhat[i * c + j];
                        }
                        for j in 0..c {
                            let dxh = gd[i * c + j] * gam[j];
                            dx[i * c + j] = rstd[i] / c as f64 * (c as f64 * dxh - s1 - xhat[i * c + j] * s2);
                        }
                    }
                    acc(*x, Tensor::from_parts(vec![r, c], dx));
                }
                if want(*gamma) || want(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            dg[j] += gd[i * c + j] * xhat[i * c + j];
                            db[j] += gd[i * c + j];
                        }
                    }
                    acc(*gamma, Tensor::from_parts(vec![c], dg));
                    acc(*beta, Tensor::from_parts(vec![c], db));
                }
            }
            &Op::Softmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), axis);
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + inn;
                        let dot: f64 = (0..len).map(|k| gd[idx(k)] * y.data()[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y.data()[idx(k)] * (gd[idx(k)] - dot);
                        }
                    }
                }
                acc(x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            &Op::LogSoftmax { x, axis } => {
                let y = &node.value;
                let (outer, len, inner) = axis_split(y.shape(), axis);
                let mut dx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for inn in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + inn;
                        let total: f64 = (0..len).map(|k| gd[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = gd[idx(k)] - y.data()[idx(k)].exp() * total;
                        }
                    }
                }
                acc(x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::MaskedFill { x, mask } => {
                let data = gd.iter().zip(mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect();
                acc(*x, Tensor::from_parts(g.shape().to_vec(), data));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let s = self.value(v).shape();
                    let len = s[*axis];
                    if want(v) {
                        let mut part = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            part.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        acc(v, Tensor::from_parts(s.to_vec(), part));
                    }
                    offset += len;
                }
            }
            Op::MaskedMeanRows { x, mask, count } => {
                let tx = self.value(*x);
                let c = tx.numel() / tx.rows();
                let mut dx = vec![0.0; tx.numel()];
                for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..c {
                        dx[r * c + j] = gd[j] / *count as f64;
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
            &Op::Gelu(x) => acc(x, zip(g, self.value(x), |d, v| d * gelu_grad(v))),
            &Op::Tanh(x) => acc(x, zip(g, &node.value, |d, y| d * (1.0 - y * y))),
            &Op::Sum(x) => acc(x, Tensor::filled(self.value(x).shape(), gd[0])),
            &Op::Reshape(x) => acc(x, Tensor::from_parts(self.value(x).shape().to_vec(), gd.to_vec())),
            &Op::Transpose(x) => {
                let (c, r) = (g.shape()[0], g.shape()[1]);
                let data = (0..r * c).map(|i| gd[(i % c) * r + i / c]).collect();
                acc(x, Tensor::from_parts(vec![r, c], data));
            }
            &Op::SliceCols { x, start } => {
                let tx = self.value(x);
                let (r, c) = (tx.shape()[0], tx.shape()[1]);
                let len = g.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                acc(x, Tensor::from_parts(vec![r, c], dx));
            }
            Op::Select { x, idx } => {
                let tx = self.value(*x);
                let v = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    dx[r * v + i] = gd[r];
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
            Op::Attention { qkv, weights } => {
                acc(*qkv, attention_backward(self.value(*qkv), weights, g));
            }
            Op::CrossEntropy { logits, targets, mask, count, probs } => {
                let v = self.value(*logits).cols();
                let scale = gd[0] / *count as f64;
                let mut dx = vec![0.0; probs.len()];
                for r in (0..mask.len()).filter(|&r| mask[r]) {
                    for j in 0..v {
                        dx[r * v + j] = probs[r * v + j] * scale;
                    }
                    dx[r * v + targets[r]] -= scale;
                }
                acc(*logits, Tensor::from_parts(self.value(*logits).shape().to_vec(), dx));
            }
            Op::KlDiv { q, p, s, mask, count, temperature } => {
                let v = self.value(*q).cols();
                // d/dq of τ²·KL(p‖softmax(q/τ)) is τ·(s − p); without rescaling it is (s − p)/τ.
                let factor = if *temperature == 1.0 { 1.0 } else { *temperature };
                let scale = gd[0] * factor / *count as f64;
                let mut dx = vec![0.0; s.len()];
                for r in (0..mask.len()).filter(|&r| mask[r]) {
                    for j in 0..v {
                        dx[r * v + j] = (s[r * v + j] - p[r * v + j]) * scale;
                    }
                }
                acc(*q, Tensor::from_parts(self.value(*q).shape().to_vec(), dx));
            }
        }
    }
}

fn attention_backward(qkv: &Tensor, w: &AttentionWeights, g: &Tensor) -> Tensor {
    let three_d = qkv.cols();
    let d = three_d / 3;
    let dh = d / w.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let src = qkv.data();
    let gd = g.data();
    let mut dqkv = vec![0.0; qkv.numel()];
    for (si, s) in w.spans.iter().enumerate() {
        let l = s.len;
        let base = s.start * three_d;
        for h in 0..w.n_heads {
            let p = w.block(si, h);
            let dout = &gd[s.start * d + h * dh..];
            // dV = Pᵀ dOut
            gemm(
                l, l, dh, 1.0,
                p, 1, l as isize,
                dout, d as isize, 1,
                1.0, &mut dqkv[base + 2 * d + h * dh..], three_d as isize, 1,
            );
            // dP = dOut Vᵀ
            let mut dp = vec![0.0; l * l];
            gemm(
                l, dh, l, 1.0,
                dout, d as isize, 1,
                &src[base + 2 * d + h * dh..], 1, three_d as isize,
                0.0, &mut dp, l as isize, 1,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
            for i in 0..l {
                let row = i * l;
                let dot: f64 = (0..=i).map(|j| dp[row + j] * p[row + j]).sum();
                for j in 0..=i {
                    dp[row + j] = p[row + j] * (dp[row + j] - dot) * scale;
                }
                for j in i + 1..l {
                    dp[row + j] = 0.0;
                }
            }
            // dQ = dS K
            gemm(
                l, l, dh, 1.0,
                &dp, l as isize, 1,
                &src[base + d + h * dh..], three_d as isize, 1,
                1.0, &mut dqkv[base + h * dh..], three_d as isize, 1,
            );
            // dK = dSᵀ Q
            gemm(
                l, l, dh, 1.0,
                &dp, 1, l as isize,
                &src[base + h * dh..], three_d as isize, 1,
                1.0, &mut dqkv[base + d + h * dh..], three_d as isize, 1,
            );
        }
    }
    Tensor::from_parts(qkv.shape().to_vec(), dqkv)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

/// `tanh` through one `exp`; noticeably cheaper than libm's and accurate to
/// a few ulp in absolute terms.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() > 20.0 {
        return u.signum();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_inner(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + 0.044715 * x * x * x))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_inner(x))
}

fn gelu_grad(x: f64) -> f64 {
    let t = gelu_inner(x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Numerically stable softmax of one row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn softmax_along(t: &Tensor, axis: usize, log: bool) -> Tensor {
    let (outer, len, inner) = axis_split(t.shape(), axis);
    let src = t.data();
    let mut out = vec![0.0; t.numel()];
    let mut buf = vec![0.0; len];
    for o in 0..outer {
        for inn in 0..inner {
            for (k, b) in buf.iter_mut().enumerate() {
                *b = src[(o * len + k) * inner + inn];
            }
            let r = if log { log_softmax_row(&buf) } else { softmax_row(&buf) };
            for (k, v) in r.into_iter().enumerate() {
                out[(o * len + k) * inner + inn] = v;
            }
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

/// `C = alpha·A·B + beta·C` for strided row/column layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1)) as isize * rs + (cols.saturating_sub(1)) as isize * cs
    };
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
    assert!(k == 0 || (last(m, k, rsa, csa) as usize) < a.len());
    assert!(k == 0 || (last(k, n, rsb, csb) as usize) < b.len());
    assert!((last(m, n, rsc, csc) as usize) < c.len());
    // SAFETY: the asserts above bound every element the kernel can touch
    // inside the three slices, and `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, alpha,
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            beta,
            c.as_mut_ptr(), rsc, csc,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul_is_noop() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::identity(2));
        let a = tape.constant(t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 7.0, -1.0]));
        let out = tape.matmul(i, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::ShapeMismatch { op: "matmul", left: vec![2, 3], right: vec![2, 3] });
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 4], 3.7));
        let s = tape.softmax(x, 1).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut tape = Tape::new();
        let base = [0.3, -1.2, 2.5, 0.0, 4.1];
        let x = tape.constant(t(&[1, 5], &base));
        let shifted: Vec<f64> = base.iter().map(|v| v + 123.456).collect();
        let y = tape.constant(t(&[1, 5], &shifted));
        let sx = tape.softmax(x, 1).unwrap();
        let sy = tape.softmax(y, 1).unwrap();
        assert!(tape.value(sx).max_abs_diff(tape.value(sy)) < 1e-12);
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 3.0]));
        let s = tape.softmax(x, 0).unwrap();
        let v = tape.value(s);
        assert!((v.at(0, 0) - 0.5).abs() < 1e-15);
        assert!((v.at(0, 1) + v.at(1, 1) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sum_backward_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &Tensor::ones(&[2, 3, 2]));
    }

    #[test]
    fn dot_product_gradients_swap_operands() {
        let mut tape = Tape::new();
        let xv = t(&[3], &[1.0, 2.0, 3.0]);
        let yv = t(&[3], &[-4.0, 0.5, 6.0]);
        let x = tape.param(xv.clone());
        let y = tape.param(yv.clone());
        let p = tape.mul(x, y).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &yv);
        assert_eq!(tape.grad(y).unwrap(), &xv);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        assert_eq!(tape.backward(x).unwrap_err(), TensorError::NonScalarLoss(vec![2]));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::ones(&[2]));
        let c = tape.constant(Tensor::ones(&[2]));
        let p = tape.mul(x, c).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn cross_entropy_uniform_is_ln_v() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 4]));
        let ce = tape.cross_entropy(logits, &[0, 3, 2], &[true, true, false]).unwrap();
        assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_confident_target_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.constant(t(&[1, 3], &[0.0, 1e6, 0.0]));
        let ce = tape.cross_entropy(logits, &[1], &[true]).unwrap();
        assert!(tape.value(ce).item().abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_empty_mask_is_error() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[2, 4]));
        let err = tape.cross_entropy(logits, &[0, 1], &[false, false]).unwrap_err();
        assert_eq!(err, TensorError::EmptyMask { op: "cross_entropy" });
    }

    #[test]
    fn kl_of_identical_logits_is_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[2, 3], &[0.1, 2.0, -1.0, 3.0, 3.0, 0.0]));
        let q = tape.param(t(&[2, 3], &[0.1, 2.0, -1.0, 3.0, 3.0, 0.0]));
        let kl = tape.kl_divergence(p, q, &[true, true], 1.0).unwrap();
        assert!(tape.value(kl).item().abs() < 1e-9);
    }

    #[test]
    fn kl_one_hot_against_uniform_is_ln_2() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[1, 2], &[0.0, -1e6]));
        let q = tape.param(t(&[1, 2], &[0.0, 0.0]));
        let kl = tape.kl_divergence(p, q, &[true], 1.0).unwrap();
        assert!((tape.value(kl).item() - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn kl_rejects_non_positive_temperature() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::zeros(&[1, 2]));
        let q = tape.param(Tensor::zeros(&[1, 2]));
        for bad in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                tape.kl_divergence(p, q, &[true], bad),
                Err(TensorError::NonPositiveTemperature(_))
            ));
        }
    }

    #[test]
    fn kl_does_not_propagate_into_teacher() {
        let mut tape = Tape::new();
        let p = tape.param(t(&[1, 3], &[1.0, 0.0, -1.0]));
        let q = tape.param(t(&[1, 3], &[0.0, 0.5, 0.0]));
        let kl = tape.kl_divergence(p, q, &[true], 2.0).unwrap();
        tape.backward(kl).unwrap();
        assert!(tape.grad(p).is_none());
        assert!(tape.grad(q).is_some());
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::zeros(&[4, 2]));
        assert!(tape.embedding(table, &[0, 4]).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one_and_are_causal() {
        let mut tape = Tape::new();
        let qkv = tape.constant(Tensor::from_fn(&[5, 12], |i| ((i * 37) % 11) as f64 * 0.1 - 0.5));
        let spans = [Span { start: 0, len: 2 }, Span { start: 2, len: 3 }];
        let out = tape.causal_attention(qkv, &spans, 2).unwrap();
        let w = tape.attention_weights(out).unwrap();
        for (si, s) in spans.iter().enumerate() {
            for h in 0..2 {
                let p = w.block(si, h);
                for i in 0..s.len {
                    let row = &p[i * s.len..(i + 1) * s.len];
                    assert!((row[..=i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn attention_rejects_bad_spans() {
        let mut tape = Tape::new();
        let qkv = tape.constant(Tensor::zeros(&[4, 6]));
        assert!(tape.causal_attention(qkv, &[Span { start: 0, len: 3 }], 1).is_err());
        assert!(tape.causal_attention(qkv, &[Span { start: 0, len: 4 }], 4).is_err());
    }
}
