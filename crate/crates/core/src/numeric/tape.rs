//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] holding its output value
//! and whatever it needs for the backward pass. Nodes only ever refer to
//! earlier nodes, so recording order is a topological order and
//! [`Tape::backward`] simply walks the nodes in reverse.
//!
//! Parameters can be registered by reference with [`Tape::param`], which
//! avoids copying large embedding tables into every step's tape.

use std::borrow::Cow;

use super::tensor::{split_axis, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Max,
    Sum,
    Mean,
}

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Tensor,
    pub running_var: Tensor,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.numel()
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Reduce { x: Var, axis: usize, mode: ReduceMode, argmax: Vec<usize> },
    Conv1d { x: Var, weight: Var, bias: Var, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, training: bool },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Gather { table: Var, indices: Vec<usize> },
    Unfold { x: Var, window: usize },
    Reshape { x: Var },
    Transpose { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Expand { x: Var, axis: usize },
    Sigmoid { x: Var },
    Tanh { x: Var },
    WindowDot { x: Var, filters: Var },
    Pick { x: Var, index: usize },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records differentiable operations for a single forward/backward pass.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    backward_done: bool,
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::dim(op, format!("incompatible shapes {a:?} and {b:?}"))
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Owned leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), true)
    }

    /// Borrowed leaf that receives a gradient.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push_leaf(Cow::Borrowed(value), true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Cow::Owned(value), false)
    }

    fn push_leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, or `None` when no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient of `v`, with zeros when nothing flowed back to it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.0].value.shape()))
    }

    /// Clears all gradients so that [`Tape::backward`] may run again.
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    /// Propagates d`out`/d(node) to every node recorded before `out`.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let out_shape = self.nodes[out.0].value.shape();
        if self.nodes[out.0].value.numel() != 1 {
            return Err(Error::NonScalarBackward(out_shape.to_vec()));
        }
        self.backward_done = true;
        self.nodes[out.0].grad = Some(vec![1.0]);

        for idx in (0..=out.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let contributions = backprop(&node.op, g, &node.value, before);
            for (v, contrib) in contributions {
                let target = &mut before[v.0];
                match target.grad.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                    None => target.grad = Some(contrib),
                }
            }
        }
        Ok(())
    }

    // ---- operations ------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, p);
        let value = Tensor::new(vec![m, p], out)?;
        Ok(self.push(value, Op::MatMul { a, b }, &[a, b]))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    /// Hadamard product of two same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("elemwise_mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds `bias[j]` to every row of a `[rows × n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let sx = tx.shape();
        if sx.len() != 2 || tb.shape() != [sx[1]] {
            return Err(shape_err("add_bias", sx, tb.shape()));
        }
        let n = sx[1];
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let value = Tensor::new(sx.to_vec(), data)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    /// Removes `axis` by taking the max, sum, or mean along it.
    ///
    /// Max sends its gradient to the first maximal element of each slice.
    pub fn reduce(&mut self, x: Var, axis: usize, mode: ReduceMode) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() {
            return Err(Error::dim(
                "reduce",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let data = tx.data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match mode {
            ReduceMode::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = data[o * len * inner + i];
                        let mut best_k = 0;
                        for k in 1..len {
                            let v = data[(o * len + k) * inner + i];
                            if v > best {
                                best = v;
                                best_k = k;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = best_k;
                    }
                }
            }
            ReduceMode::Sum | ReduceMode::Mean => {
                for o in 0..outer {
                    for k in 0..len {
                        let row = &data[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if mode == ReduceMode::Mean {
                    let scale = 1.0 / len as f64;
                    out.iter_mut().for_each(|v| *v *= scale);
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Reduce { x, axis, mode, argmax }, &[x]))
    }

    /// Stride-1 cross-correlation with symmetric zero padding.
    ///
    /// `x: [C_in × L]`, `weight: [C_out × C_in × kw]`, `bias: [C_out]`,
    /// output `[C_out × (L + 2·pad − kw + 1)]`.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(weight), self.value(bias));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] {
            return Err(shape_err("conv1d", sx, sw));
        }
        let (c_in, len) = (sx[0], sx[1]);
        let (c_out, kw) = (sw[0], sw[2]);
        if tb.shape() != [c_out] {
            return Err(shape_err("conv1d", sw, tb.shape()));
        }
        if kw == 0 || len + 2 * pad < kw {
            return Err(Error::dim(
                "conv1d",
                format!("kernel width {kw} exceeds padded input length {}", len + 2 * pad),
            ));
        }
        let out_len = len + 2 * pad - kw + 1;
        let xp = pad_columns(tx.data(), c_in, len, pad);
        let lp = len + 2 * pad;
        let w = tw.data();
        let mut out = vec![0.0; c_out * out_len];
        for o in 0..c_out {
            let row = &mut out[o * out_len..(o + 1) * out_len];
            row.iter_mut().for_each(|v| *v = tb.data()[o]);
            for c in 0..c_in {
                for t in 0..kw {
                    let wv = w[(o * c_in + c) * kw + t];
                    let src = &xp[c * lp + t..c * lp + t + out_len];
                    for (r, s) in row.iter_mut().zip(src) {
                        *r += wv * s;
                    }
                }
            }
        }
        let value = Tensor::new(vec![c_out, out_len], out)?;
        Ok(self.push(value, Op::Conv1d { x, weight, bias, pad }, &[x, weight, bias]))
    }

    /// Batch normalization of `x: [C × N]` over its second axis.
    ///
    /// In training mode the batch statistics are used and `state` is
    /// updated with momentum [`BN_MOMENTUM`]; in eval mode the running
    /// statistics are used and `state` is left alone.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        training: bool,
    ) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let sx = tx.shape();
        if sx.len() != 2 {
            return Err(Error::dim("batchnorm", format!("expected [C × N], got {sx:?}")));
        }
        let (c, n) = (sx[0], sx[1]);
        if tg.shape() != [c] || tb.shape() != [c] || state.channels() != c {
            return Err(shape_err("batchnorm", sx, tg.shape()));
        }
        if n == 0 {
            return Err(Error::DegenerateBatch);
        }
        let data = tx.data();
        let mut xhat = vec![0.0; c * n];
        let mut inv_std = vec![0.0; c];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let row = &data[ch * n..(ch + 1) * n];
            let (mean, var) = if training {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let rm = &mut state.running_mean.data_mut()[ch];
                *rm = BN_MOMENTUM * *rm + (1.0 - BN_MOMENTUM) * mean;
                let rv = &mut state.running_var.data_mut()[ch];
                *rv = BN_MOMENTUM * *rv + (1.0 - BN_MOMENTUM) * var;
                (mean, var)
            } else {
                (
                    state.running_mean.data()[ch],
                    state.running_var.data()[ch],
                )
            };
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[ch * n + j] = xh;
                out[ch * n + j] = tg.data()[ch] * xh + tb.data()[ch];
            }
        }
        let value = Tensor::new(vec![c, n], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training },
            &[x, gamma, beta],
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let sl = tl.shape();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {sl:?} vs {} labels", labels.len()),
            ));
        }
        let (b, n) = (sl[0], sl[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Label { label, classes: n });
        }
        let probs = softmax_rows(tl.data(), b, n);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = &tl.data()[i * n..(i + 1) * n];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                lse - row[y]
            })
            .sum::<f64>()
            / b as f64;
        let value = Tensor::scalar(loss);
        Ok(self.push(
            value,
            Op::SoftmaxXent { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    /// Selects entries along the last axis: `out[.., j] = table[.., indices[j]]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let shape = tt.shape();
        let size = *shape.last().expect("rank >= 1");
        if indices.is_empty() {
            return Err(Error::dim("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= size) {
            return Err(Error::Vocabulary { index: bad, size });
        }
        let outer = tt.numel() / size;
        let l = indices.len();
        let mut out = vec![0.0; outer * l];
        for o in 0..outer {
            for (j, &idx) in indices.iter().enumerate() {
                out[o * l + j] = tt.data()[o * size + idx];
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = l;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Gather { table, indices: indices.to_vec() }, &[table]))
    }

    /// Sliding windows of width `window` over the columns of `x: [C × L]`,
    /// producing `[C × window × (L − window + 1)]` with
    /// `out[a, t, i] = x[a, i + t]`.
    pub fn unfold(&mut self, x: Var, window: usize) -> Result<Var> {
        let tx = self.value(x);
        let sx = tx.shape();
        if sx.len() != 2 || window == 0 || window > sx[1] {
            return Err(Error::dim(
                "unfold",
                format!("window {window} does not fit input {sx:?}"),
            ));
        }
        let (c, len) = (sx[0], sx[1]);
        let out_len = len - window + 1;
        let mut out = vec![0.0; c * window * out_len];
        for a in 0..c {
            for t in 0..window {
                let dst = &mut out[(a * window + t) * out_len..(a * window + t + 1) * out_len];
                dst.copy_from_slice(&tx.data()[a * len + t..a * len + t + out_len]);
            }
        }
        let value = Tensor::new(vec![c, window, out_len], out)?;
        Ok(self.push(value, Op::Unfold { x, window }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let sx = tx.shape();
        if sx.len() != 2 {
            return Err(Error::dim("transpose", format!("expected a matrix, got {sx:?}")));
        }
        let (r, c) = (sx[0], sx[1]);
        let value = Tensor::new(vec![c, r], transpose_data(tx.data(), r, c))?;
        Ok(self.push(value, Op::Transpose { x }, &[x]))
    }

    /// Joins tensors along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} invalid for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec(), axis }, parts))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim(
                "slice",
                format!("range {start}..{} on axis {axis} invalid for {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let begin = (o * full + start) * inner;
            out.extend_from_slice(&tx.data()[begin..begin + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    /// Inserts a new axis of size `count` at position `axis`, repeating the data.
    pub fn expand(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis > shape.len() || count == 0 {
            return Err(Error::dim("expand", format!("axis {axis} invalid for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for _ in 0..count {
                out.extend_from_slice(&tx.data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.insert(axis, count);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(value, Op::Expand { x, axis }, &[x]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sigmoid { x }, &[x]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Tanh { x }, &[x]))
    }

    /// Per-offset inner products of shared filters with sliding windows.
    ///
    /// `x: [h × L]`, `filters: [F × h × r]`, output `[F × r × (L − r + 1)]`
    /// with `out[f, k, i] = Σ_a filters[f, a, k] · x[a, i + k]`.
    pub fn window_dot(&mut self, x: Var, filters: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(filters));
        let (sx, sw) = (tx.shape(), tw.shape());
        if sx.len() != 2 || sw.len() != 3 || sw[1] != sx[0] || sw[2] > sx[1] {
            return Err(shape_err("window_dot", sx, sw));
        }
        let (h, len) = (sx[0], sx[1]);
        let (f, r) = (sw[0], sw[2]);
        let out_len = len - r + 1;
        let mut out = vec![0.0; f * r * out_len];
        for fi in 0..f {
            for k in 0..r {
                let dst = &mut out[(fi * r + k) * out_len..(fi * r + k + 1) * out_len];
                for a in 0..h {
                    let wv = tw.data()[(fi * h + a) * r + k];
                    let src = &tx.data()[a * len + k..a * len + k + out_len];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += wv * s;
                    }
                }
            }
        }
        let value = Tensor::new(vec![f, r, out_len], out)?;
        Ok(self.push(value, Op::WindowDot { x, filters }, &[x, filters]))
    }

    /// Selects one element (by flat row-major index) as a `[1]` tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let tx = self.value(x);
        if index >= tx.numel() {
            return Err(Error::dim(
                "pick",
                format!("index {index} out of range for {:?}", tx.shape()),
            ));
        }
        let value = Tensor::scalar(tx.data()[index]);
        Ok(self.push(value, Op::Pick { x, index }, &[x]))
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_rows(data: &[f64], rows: usize, n: usize) -> Vec<f64> {
    let mut probs = vec![0.0; rows * n];
    for i in 0..rows {
        let row = &data[i * n..(i + 1) * n];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (p, e) in probs[i * n..(i + 1) * n].iter_mut().zip(exps) {
            *p = e / z;
        }
    }
    probs
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let row = &mut out[i * p..(i + 1) * p];
        for kk in 0..k {
            let av = a[i * k + kk];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in row.iter_mut().zip(&b[kk * p..(kk + 1) * p]) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = data[i * cols + j];
        }
    }
    out
}

fn pad_columns(data: &[f64], rows: usize, len: usize, pad: usize) -> Vec<f64> {
    if pad == 0 {
        return data.to_vec();
    }
    let lp = len + 2 * pad;
    let mut out = vec![0.0; rows * lp];
    for r in 0..rows {
        out[r * lp + pad..r * lp + pad + len].copy_from_slice(&data[r * len..(r + 1) * len]);
    }
    out
}

/// Gradient contributions of one node to its inputs.
fn backprop(op: &Op, g: &[f64], out: &Tensor, nodes: &[Node]) -> Vec<(Var, Vec<f64>)> {
    let needs = |v: Var| nodes[v.0].requires_grad;
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let mut res = Vec::new();
    match op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, p) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if needs(*a) {
                // dA = G · Bᵀ
                let bt = transpose_data(tb.data(), k, p);
                let mut ga = vec![0.0; m * k];
                matmul_into(g, &bt, &mut ga, m, p, k);
                res.push((*a, ga));
            }
            if needs(*b) {
                // dB = Aᵀ · G
                let at = transpose_data(ta.data(), m, k);
                let mut gb = vec![0.0; k * p];
                matmul_into(&at, g, &mut gb, k, m, p);
                res.push((*b, gb));
            }
        }
        Op::Add { a, b } => {
            if needs(*a) {
                res.push((*a, g.to_vec()));
            }
            if needs(*b) {
                res.push((*b, g.to_vec()));
            }
        }
        Op::Sub { a, b } => {
            if needs(*a) {
                res.push((*a, g.to_vec()));
            }
            if needs(*b) {
                res.push((*b, g.iter().map(|v| -v).collect()));
            }
        }
        Op::Mul { a, b } => {
            if needs(*a) {
                let gb = val(*b).data();
                res.push((*a, g.iter().zip(gb).map(|(x, y)| x * y).collect()));
            }
            if needs(*b) {
                let ga = val(*a).data();
                res.push((*b, g.iter().zip(ga).map(|(x, y)| x * y).collect()));
            }
        }
        Op::AddBias { x, bias } => {
            if needs(*x) {
                res.push((*x, g.to_vec()));
            }
            if needs(*bias) {
                let n = val(*bias).numel();
                let mut gb = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v;
                }
                res.push((*bias, gb));
            }
        }
        Op::Reduce { x, axis, mode, argmax } => {
            if needs(*x) {
                let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let go = g[o * inner + i];
                        match mode {
                            ReduceMode::Max => {
                                gx[(o * len + argmax[o * inner + i]) * inner + i] += go;
                            }
                            ReduceMode::Sum => {
                                for k in 0..len {
                                    gx[(o * len + k) * inner + i] += go;
                                }
                            }
                            ReduceMode::Mean => {
                                let s = go / len as f64;
                                for k in 0..len {
                                    gx[(o * len + k) * inner + i] += s;
                                }
                            }
                        }
                    }
                }
                res.push((*x, gx));
            }
        }
        Op::Conv1d { x, weight, bias, pad } => {
            let (tx, tw) = (val(*x), val(*weight));
            let (c_in, len) = (tx.shape()[0], tx.shape()[1]);
            let (c_out, kw) = (tw.shape()[0], tw.shape()[2]);
            let out_len = out.shape()[1];
            let lp = len + 2 * pad;
            if needs(*bias) {
                let gb = (0..c_out)
                    .map(|o| g[o * out_len..(o + 1) * out_len].iter().sum())
                    .collect();
                res.push((*bias, gb));
            }
            if needs(*weight) {
                let xp = pad_columns(tx.data(), c_in, len, *pad);
                let mut gw = vec![0.0; c_out * c_in * kw];
                for o in 0..c_out {
                    let go = &g[o * out_len..(o + 1) * out_len];
                    for c in 0..c_in {
                        for t in 0..kw {
                            let src = &xp[c * lp + t..c * lp + t + out_len];
                            gw[(o * c_in + c) * kw + t] =
                                go.iter().zip(src).map(|(a, b)| a * b).sum();
                        }
                    }
                }
                res.push((*weight, gw));
            }
            if needs(*x) {
                let mut gxp = vec![0.0; c_in * lp];
                for o in 0..c_out {
                    let go = &g[o * out_len..(o + 1) * out_len];
                    for c in 0..c_in {
                        for t in 0..kw {
                            let wv = tw.data()[(o * c_in + c) * kw + t];
                            let dst = &mut gxp[c * lp + t..c * lp + t + out_len];
                            for (d, s) in dst.iter_mut().zip(go) {
                                *d += wv * s;
                            }
                        }
                    }
                }
                let mut gx = vec![0.0; c_in * len];
                for c in 0..c_in {
                    gx[c * len..(c + 1) * len]
                        .copy_from_slice(&gxp[c * lp + pad..c * lp + pad + len]);
                }
                res.push((*x, gx));
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
            let (c, n) = (out.shape()[0], out.shape()[1]);
            let tg = val(*gamma).data();
            if needs(*gamma) {
                let gg = (0..c)
                    .map(|ch| (0..n).map(|j| g[ch * n + j] * xhat[ch * n + j]).sum())
                    .collect();
                res.push((*gamma, gg));
            }
            if needs(*beta) {
                let gb = (0..c).map(|ch| g[ch * n..(ch + 1) * n].iter().sum()).collect();
                res.push((*beta, gb));
            }
            if needs(*x) {
                let mut gx = vec![0.0; c * n];
                for ch in 0..c {
                    let row = ch * n..(ch + 1) * n;
                    let dxhat: Vec<f64> = g[row.clone()].iter().map(|v| v * tg[ch]).collect();
                    if *training {
                        let nf = n as f64;
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat
                            .iter()
                            .zip(&xhat[row.clone()])
                            .map(|(d, xh)| d * xh)
                            .sum();
                        for j in 0..n {
                            gx[ch * n + j] = inv_std[ch] / nf
                                * (nf * dxhat[j] - sum_d - xhat[ch * n + j] * sum_dx);
                        }
                    } else {
                        for j in 0..n {
                            gx[ch * n + j] = dxhat[j] * inv_std[ch];
                        }
                    }
                }
                res.push((*x, gx));
            }
        }
        Op::SoftmaxXent { logits, labels, probs } => {
            if needs(*logits) {
                let b = labels.len();
                let n = probs.len() / b;
                let scale = g[0] / b as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * n + y] -= scale;
                }
                res.push((*logits, gl));
            }
        }
        Op::Gather { table, indices } => {
            if needs(*table) {
                let tt = val(*table);
                let size = *tt.shape().last().unwrap();
                let outer = tt.numel() / size;
                let l = indices.len();
                let mut gt = vec![0.0; tt.numel()];
                for o in 0..outer {
                    for (j, &idx) in indices.iter().enumerate() {
                        gt[o * size + idx] += g[o * l + j];
                    }
                }
                res.push((*table, gt));
            }
        }
        Op::Unfold { x, window } => {
            if needs(*x) {
                let (c, len) = (val(*x).shape()[0], val(*x).shape()[1]);
                let out_len = len - window + 1;
                let mut gx = vec![0.0; c * len];
                for a in 0..c {
                    for t in 0..*window {
                        let src = &g[(a * window + t) * out_len..(a * window + t + 1) * out_len];
                        for (d, s) in gx[a * len + t..a * len + t + out_len].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                res.push((*x, gx));
            }
        }
        Op::Reshape { x } => {
            if needs(*x) {
                res.push((*x, g.to_vec()));
            }
        }
        Op::Transpose { x } => {
            if needs(*x) {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                res.push((*x, transpose_data(g, r, c)));
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(out.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if needs(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let begin = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[begin..begin + len * inner]);
                    }
                    res.push((p, gp));
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            if needs(*x) {
                let (outer, full, inner) = split_axis(val(*x).shape(), *axis);
                let len = out.shape()[*axis];
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let begin = (o * full + start) * inner;
                    gx[begin..begin + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                res.push((*x, gx));
            }
        }
        Op::Expand { x, axis } => {
            if needs(*x) {
                let shape = val(*x).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let count = out.shape()[*axis];
                let mut gx = vec![0.0; outer * inner];
                for o in 0..outer {
                    for k in 0..count {
                        let src = &g[(o * count + k) * inner..(o * count + k + 1) * inner];
                        for (d, s) in gx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                res.push((*x, gx));
            }
        }
        Op::Sigmoid { x } => {
            if needs(*x) {
                let gx = g.iter().zip(out.data()).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                res.push((*x, gx));
            }
        }
        Op::Tanh { x } => {
            if needs(*x) {
                let gx = g.iter().zip(out.data()).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                res.push((*x, gx));
            }
        }
        Op::WindowDot { x, filters } => {
            let (tx, tw) = (val(*x), val(*filters));
            let (h, len) = (tx.shape()[0], tx.shape()[1]);
            let (f, r) = (tw.shape()[0], tw.shape()[2]);
            let out_len = len - r + 1;
            if needs(*filters) {
                let mut gw = vec![0.0; f * h * r];
                for fi in 0..f {
                    for k in 0..r {
                        let go = &g[(fi * r + k) * out_len..(fi * r + k + 1) * out_len];
                        for a in 0..h {
                            let src = &tx.data()[a * len + k..a * len + k + out_len];
                            gw[(fi * h + a) * r + k] =
                                go.iter().zip(src).map(|(p, q)| p * q).sum();
                        }
                    }
                }
                res.push((*filters, gw));
            }
            if needs(*x) {
                let mut gx = vec![0.0; h * len];
                for fi in 0..f {
                    for k in 0..r {
                        let go = &g[(fi * r + k) * out_len..(fi * r + k + 1) * out_len];
                        for a in 0..h {
                            let wv = tw.data()[(fi * h + a) * r + k];
                            let dst = &mut gx[a * len + k..a * len + k + out_len];
                            for (d, s) in dst.iter_mut().zip(go) {
                                *d += wv * s;
                            }
                        }
                    }
                }
                res.push((*x, gx));
            }
        }
        Op::Pick { x, index } => {
            if needs(*x) {
                let mut gx = vec![0.0; val(*x).numel()];
                gx[*index] = g[0];
                res.push((*x, gx));
            }
        }
    }
    res
}
