//! Reverse-mode automatic differentiation over an eagerly evaluated tape.
//!
//! A [`Graph`] records one operation per node in execution order; parents
//! always precede children, so a single reverse sweep propagates gradients.
//! Parameters are referenced by [`ParamId`] and never copied into the graph;
//! after `backward`, their gradients are drained with `take_param_grads` and
//! folded into the [`ParamStore`] by the caller.

use super::store::{ParamId, ParamStore};
use super::tensor::{Real, Tensor, TensorError, TensorResult};
use crate::rng::{mix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Payload<F> {
    Param(ParamId),
    Input,
    Var,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, F),
    Matmul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Sqrt(NodeId),
    LogSoftmax(NodeId),
    Dropout { x: NodeId, mask: Vec<F> },
    MeanRows(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows { x: NodeId, start: usize },
    GatherRows { x: NodeId, indices: Vec<usize> },
    GatherEntries { x: NodeId, indices: Vec<(usize, usize)> },
    Unfold { x: NodeId, width: usize },
    PadRowsTop { x: NodeId, rows: usize },
    Sum(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    BceWithLogits { z: NodeId, target: Vec<F> },
}

struct Node<F> {
    value: Option<Tensor<F>>, // None for Param leaves: read through the store
    rows: usize,
    cols: usize,
    needs_grad: bool,
    grad: Option<Vec<F>>,
    payload: Payload<F>,
}

pub struct Graph<'s, F: Real> {
    store: &'s ParamStore<F>,
    nodes: Vec<Node<F>>,
    mode: Mode,
    dropout_seed: u64,
    dropout_count: u64,
    state_updates: Vec<(ParamId, Vec<F>)>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

impl<'s, F: Real> Graph<'s, F> {
    pub fn new(store: &'s ParamStore<F>, mode: Mode) -> Self {
        Self::with_dropout_seed(store, mode, 0)
    }

    /// `dropout_seed` drives the counter-based dropout mask generator: a graph
    /// rebuilt with the same seed draws identical masks.
    pub fn with_dropout_seed(store: &'s ParamStore<F>, mode: Mode, dropout_seed: u64) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            mode,
            dropout_seed,
            dropout_count: 0,
            state_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Option<Tensor<F>>,
        rows: usize,
        cols: usize,
        needs_grad: bool,
        payload: Payload<F>,
    ) -> NodeId {
        self.nodes.push(Node {
            value,
            rows,
            cols,
            needs_grad,
            grad: None,
            payload,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// The forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        let n = &self.nodes[id.0];
        match &n.payload {
            Payload::Param(pid) => self.store.get(*pid),
            _ => n.value.as_ref().expect("non-param node has a value"),
        }
    }

    pub fn value_data(&self, id: NodeId) -> &[F] {
        self.value(id).data()
    }

    /// Gradient of a leaf created with [`var`](Self::var), available after
    /// `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- leaves ----------------------------------------------------------

    pub fn param(&mut self, id: ParamId) -> NodeId {
        let t = self.store.get(id);
        let (r, c) = t.dims2().expect("parameters are 2-D");
        let needs = t.requires_grad;
        self.push(None, r, c, needs, Payload::Param(id))
    }

    /// Constant input; never receives gradients.
    pub fn input(&mut self, t: Tensor<F>) -> TensorResult<NodeId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(Some(t), r, c, false, Payload::Input))
    }

    /// Leaf that accumulates gradients; used by tests and probes.
    pub fn var(&mut self, t: Tensor<F>) -> TensorResult<NodeId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(Some(t), r, c, true, Payload::Var))
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.input(Tensor::scalar(F::of(v))).unwrap()
    }

    // ---- elementwise -----------------------------------------------------

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(F, F) -> F,
        payload: Payload<F>,
    ) -> TensorResult<NodeId> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        if (ar, ac) != (br, bc) {
            return Err(shape_err(op, format!("{ar}x{ac} vs {br}x{bc}")));
        }
        let data: Vec<F> = self
            .value_data(a)
            .iter()
            .zip(self.value_data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::from_vec(&[ar, ac], data)?;
        Ok(self.push(Some(t), ar, ac, needs, payload))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Payload::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Payload::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Payload::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Payload::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> TensorResult<NodeId> {
        let (r, cl) = self.dims(a);
        let cf = F::of(c);
        let data: Vec<F> = self.value_data(a).iter().map(|&x| x + cf).collect();
        let needs = self.needs(a);
        let t = Tensor::from_vec(&[r, cl], data)?;
        Ok(self.push(Some(t), r, cl, needs, Payload::AddScalar(a)))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> TensorResult<NodeId> {
        let (r, cl) = self.dims(a);
        let cf = F::of(c);
        let data: Vec<F> = self.value_data(a).iter().map(|&x| x * cf).collect();
        let needs = self.needs(a);
        let t = Tensor::from_vec(&[r, cl], data)?;
        Ok(self.push(Some(t), r, cl, needs, Payload::MulScalar(a, cf)))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(F) -> F,
        payload: Payload<F>,
    ) -> TensorResult<NodeId> {
        let (r, c) = self.dims(a);
        let data: Vec<F> = self.value_data(a).iter().map(|&x| f(x)).collect();
        let needs = self.needs(a);
        let t = Tensor::from_vec(&[r, c], data)?;
        Ok(self.push(Some(t), r, c, needs, payload))
    }

    pub fn relu(&mut self, a: NodeId) -> TensorResult<NodeId> {
        self.unary(a, |x| x.max(F::zero()), Payload::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> TensorResult<NodeId> {
        self.unary(a, sigmoid, Payload::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> TensorResult<NodeId> {
        self.unary(a, |x| x.tanh(), Payload::Tanh(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> TensorResult<NodeId> {
        self.unary(a, |x| x.sqrt(), Payload::Sqrt(a))
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} . {k2}x{n}")));
        }
        let data = mm(self.value_data(a), self.value_data(b), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        let t = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(Some(t), m, n, needs, Payload::Matmul(a, b)))
    }

    /// `X (m x n) + bias (1 x n)`, broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> TensorResult<NodeId> {
        let (m, n) = self.dims(x);
        let (br, bn) = self.dims(bias);
        if br != 1 || bn != n {
            return Err(shape_err("add_bias", format!("{m}x{n} + {br}x{bn}")));
        }
        let bv = self.value_data(bias).to_vec();
        let mut data = self.value_data(x).to_vec();
        for row in data.chunks_mut(n) {
            for (d, &b) in row.iter_mut().zip(&bv) {
                *d = *d + b;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        let t = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(Some(t), m, n, needs, Payload::AddBias(x, bias)))
    }

    // ---- softmax / losses --------------------------------------------------

    /// Row-wise log-softmax.
    pub fn log_softmax(&mut self, a: NodeId) -> TensorResult<NodeId> {
        let (m, n) = self.dims(a);
        if n == 0 {
            return Err(shape_err("log_softmax", "empty rows".into()));
        }
        let mut data = self.value_data(a).to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let lse = row
                .iter()
                .map(|&x| (x - max).exp())
                .fold(F::zero(), |s, e| s + e)
                .ln()
                + max;
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        let needs = self.needs(a);
        let t = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(Some(t), m, n, needs, Payload::LogSoftmax(a)))
    }

    /// Binary cross-entropy against fixed 0/1 targets, computed from logits in
    /// log-space and summed over all entries.
    pub fn bce_with_logits(&mut self, z: NodeId, target: &[F]) -> TensorResult<NodeId> {
        let (m, n) = self.dims(z);
        if target.len() != m * n {
            return Err(shape_err(
                "bce_with_logits",
                format!("logits {m}x{n} vs {} targets", target.len()),
            ));
        }
        let mut loss = F::zero();
        for (&zi, &yi) in self.value_data(z).iter().zip(target) {
            loss = loss + zi.max(F::zero()) - zi * yi + (F::one() + (-zi.abs()).exp()).ln();
        }
        let needs = self.needs(z);
        let t = Tensor::scalar(loss);
        Ok(self.push(
            Some(t),
            1,
            1,
            needs,
            Payload::BceWithLogits {
                z,
                target: target.to_vec(),
            },
        ))
    }

    // ---- structure ----------------------------------------------------------

    /// Inverted dropout: in train mode kept entries are scaled by `1/(1-p)`.
    /// Identity in eval mode and for `p = 0`. Masks come from a counter-based
    /// generator keyed by the graph's dropout seed.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> TensorResult<NodeId> {
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let (m, n) = self.dims(x);
        let mut rng = SeededRng::new(mix(self.dropout_seed, self.dropout_count));
        self.dropout_count += 1;
        let scale = F::of(1.0 / (1.0 - p));
        let mask: Vec<F> = (0..m * n)
            .map(|_| if rng.uniform() < p { F::zero() } else { scale })
            .collect();
        let data: Vec<F> = self
            .value_data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &k)| v * k)
            .collect();
        let needs = self.needs(x);
        let t = Tensor::from_vec(&[m, n], data)?;
        Ok(self.push(Some(t), m, n, needs, Payload::Dropout { x, mask }))
    }

    /// Mean over rows: `T x C -> 1 x C` (average pooling over time).
    pub fn mean_rows(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let (m, n) = self.dims(x);
        if m == 0 {
            return Err(shape_err("mean_rows", "no rows".into()));
        }
        let inv = F::of(1.0 / m as f64);
        let mut out = vec![F::zero(); n];
        for row in self.value_data(x).chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        out.iter_mut().for_each(|o| *o = *o * inv);
        let needs = self.needs(x);
        let t = Tensor::from_vec(&[1, n], out)?;
        Ok(self.push(Some(t), 1, n, needs, Payload::MeanRows(x)))
    }

    /// Stack along rows; all inputs must share a column count.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> TensorResult<NodeId> {
        if xs.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let (_, n) = self.dims(xs[0]);
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let (r, c) = self.dims(x);
            if c != n {
                return Err(shape_err("concat_rows", format!("cols {c} vs {n}")));
            }
            rows += r;
            data.extend_from_slice(self.value_data(x));
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        let t = Tensor::from_vec(&[rows, n], data)?;
        Ok(self.push(Some(t), rows, n, needs, Payload::ConcatRows(xs.to_vec())))
    }

    /// Stack along columns; all inputs must share a row count.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> TensorResult<NodeId> {
        if xs.is_empty() {
            return Err(shape_err("concat_cols", "no inputs".into()));
        }
        let (m, _) = self.dims(xs[0]);
        let mut cols = 0;
        for &x in xs {
            let (r, c) = self.dims(x);
            if r != m {
                return Err(shape_err("concat_cols", format!("rows {r} vs {m}")));
            }
            cols += c;
        }
        let mut data = vec![F::zero(); m * cols];
        let mut offset = 0;
        for &x in xs {
            let (_, c) = self.dims(x);
            let src = self.value_data(x);
            for r in 0..m {
                data[r * cols + offset..r * cols + offset + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            offset += c;
        }
        let needs = xs.iter().any(|&x| self.needs(x));
        let t = Tensor::from_vec(&[m, cols], data)?;
        Ok(self.push(Some(t), m, cols, needs, Payload::ConcatCols(xs.to_vec())))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> TensorResult<NodeId> {
        let (m, n) = self.dims(x);
        if start >= end || end > m {
            return Err(shape_err(
                "slice_rows",
                format!("range {start}..{end} of {m} rows"),
            ));
        }
        let data = self.value_data(x)[start * n..end * n].to_vec();
        let needs = self.needs(x);
        let rows = end - start;
        let t = Tensor::from_vec(&[rows, n], data)?;
        Ok(self.push(Some(t), rows, n, needs, Payload::SliceRows { x, start }))
    }

    /// Select rows by index; duplicate indices are allowed and their
    /// gradients accumulate.
    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> TensorResult<NodeId> {
        let (m, n) = self.dims(x);
        if indices.is_empty() {
            return Err(shape_err("gather_rows", "no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("index {bad} >= {m} rows")));
        }
        let src = self.value_data(x);
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let needs = self.needs(x);
        let rows = indices.len();
        let t = Tensor::from_vec(&[rows, n], data)?;
        Ok(self.push(
            Some(t),
            rows,
            n,
            needs,
            Payload::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Select individual entries `(row, col)` into a `1 x k` tensor.
    pub fn gather_entries(
        &mut self,
        x: NodeId,
        indices: &[(usize, usize)],
    ) -> TensorResult<NodeId> {
        let (m, n) = self.dims(x);
        if indices.is_empty() {
            return Err(shape_err("gather_entries", "no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(shape_err(
                "gather_entries",
                format!("entry {bad:?} outside {m}x{n}"),
            ));
        }
        let src = self.value_data(x);
        let data: Vec<F> = indices.iter().map(|&(r, c)| src[r * n + c]).collect();
        let needs = self.needs(x);
        let k = indices.len();
        let t = Tensor::from_vec(&[1, k], data)?;
        Ok(self.push(
            Some(t),
            1,
            k,
            needs,
            Payload::GatherEntries {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Sliding windows of `width` rows flattened to columns:
    /// `T x C -> (T - width + 1) x (width * C)`.
    pub fn unfold(&mut self, x: NodeId, width: usize) -> TensorResult<NodeId> {
        let (m, n) = self.dims(x);
        if width == 0 || width > m {
            return Err(shape_err("unfold", format!("width {width} over {m} rows")));
        }
        let out_rows = m - width + 1;
        let src = self.value_data(x);
        let mut data = Vec::with_capacity(out_rows * width * n);
        for r in 0..out_rows {
            data.extend_from_slice(&src[r * n..(r + width) * n]);
        }
        let needs = self.needs(x);
        let t = Tensor::from_vec(&[out_rows, width * n], data)?;
        Ok(self.push(
            Some(t),
            out_rows,
            width * n,
            needs,
            Payload::Unfold { x, width },
        ))
    }

    /// Prepend `rows` zero rows.
    pub fn pad_rows_top(&mut self, x: NodeId, rows: usize) -> TensorResult<NodeId> {
        let (m, n) = self.dims(x);
        if rows == 0 {
            return Ok(x);
        }
        let mut data = vec![F::zero(); (m + rows) * n];
        data[rows * n..].copy_from_slice(self.value_data(x));
        let needs = self.needs(x);
        let t = Tensor::from_vec(&[m + rows, n], data)?;
        Ok(self.push(Some(t), m + rows, n, needs, Payload::PadRowsTop { x, rows }))
    }

    pub fn sum(&mut self, x: NodeId) -> TensorResult<NodeId> {
        let total = self
            .value_data(x)
            .iter()
            .fold(F::zero(), |acc, &v| acc + v);
        let needs = self.needs(x);
        let t = Tensor::scalar(total);
        Ok(self.push(Some(t), 1, 1, needs, Payload::Sum(x)))
    }

    /// One-dimensional convolution over time with stride 1 and no padding,
    /// built from unfold + matmul + bias. Inputs shorter than the kernel are
    /// left-zero-padded up to the kernel width.
    ///
    /// `weight` has shape `(width * in_channels) x out_channels`, `bias`
    /// `1 x out_channels`.
    pub fn conv1d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        width: usize,
    ) -> TensorResult<NodeId> {
        let (t_len, in_ch) = self.dims(x);
        let (wr, _) = self.dims(weight);
        if wr != width * in_ch {
            return Err(shape_err(
                "conv1d",
                format!("weight rows {wr} != width {width} * channels {in_ch}"),
            ));
        }
        let x = if t_len < width {
            self.pad_rows_top(x, width - t_len)?
        } else {
            x
        };
        let cols = self.unfold(x, width)?;
        let prod = self.matmul(cols, weight)?;
        self.add_bias(prod, bias)
    }

    /// Batch normalization over rows, per column. In train mode the batch
    /// statistics normalize the input and updated running statistics are
    /// queued for the caller (`take_state_updates`); in eval mode the stored
    /// running statistics are applied as a fixed affine map.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> TensorResult<NodeId> {
        let (m, n) = self.dims(x);
        let (gr, gn) = self.dims(gamma);
        let (br, bn) = self.dims(beta);
        if gr != 1 || gn != n || br != 1 || bn != n {
            return Err(shape_err(
                "batch_norm",
                format!("x {m}x{n}, gamma {gr}x{gn}, beta {br}x{bn}"),
            ));
        }
        let train = self.mode == Mode::Train;
        let (mean, var) = if train {
            let mut mean = vec![F::zero(); n];
            for row in self.value_data(x).chunks(n) {
                for (s, &v) in mean.iter_mut().zip(row) {
                    *s = *s + v;
                }
            }
            let inv_m = F::of(1.0 / m as f64);
            mean.iter_mut().for_each(|s| *s = *s * inv_m);
            let mut var = vec![F::zero(); n];
            for row in self.value_data(x).chunks(n) {
                for ((s, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - mu;
                    *s = *s + d * d;
                }
            }
            var.iter_mut().for_each(|s| *s = *s * inv_m);
            (mean, var)
        } else {
            (
                self.store.get(running_mean).data().to_vec(),
                self.store.get(running_var).data().to_vec(),
            )
        };
        if mean.len() != n || var.len() != n {
            return Err(shape_err(
                "batch_norm",
                format!("running stats length {} vs {n} columns", mean.len()),
            ));
        }
        let inv_std: Vec<F> = var
            .iter()
            .map(|&v| F::one() / (v + F::of(eps)).sqrt())
            .collect();
        let gv = self.value_data(gamma).to_vec();
        let bv = self.value_data(beta).to_vec();
        let mut xhat = vec![F::zero(); m * n];
        let mut out = vec![F::zero(); m * n];
        for (r, row) in self.value_data(x).chunks(n).enumerate() {
            for c in 0..n {
                let h = (row[c] - mean[c]) * inv_std[c];
                xhat[r * n + c] = h;
                out[r * n + c] = gv[c] * h + bv[c];
            }
        }
        if train {
            // Running update uses the unbiased variance, matching the usual
            // train/eval convention.
            let mom = F::of(momentum);
            let keep = F::one() - mom;
            let unbias = if m > 1 {
                F::of(m as f64 / (m as f64 - 1.0))
            } else {
                F::one()
            };
            let old_mean = self.store.get(running_mean).data();
            let old_var = self.store.get(running_var).data();
            let new_mean: Vec<F> = old_mean
                .iter()
                .zip(&mean)
                .map(|(&o, &b)| keep * o + mom * b)
                .collect();
            let new_var: Vec<F> = old_var
                .iter()
                .zip(&var)
                .map(|(&o, &b)| keep * o + mom * b * unbias)
                .collect();
            self.state_updates.push((running_mean, new_mean));
            self.state_updates.push((running_var, new_var));
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let t = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(
            Some(t),
            m,
            n,
            needs,
            Payload::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Drain queued running-statistic updates (batch norm in train mode).
    pub fn take_state_updates(&mut self) -> Vec<(ParamId, Vec<F>)> {
        std::mem::take(&mut self.state_updates)
    }

    // ---- backward ----------------------------------------------------------

    fn ensure_grad(&mut self, id: NodeId) {
        let n = &mut self.nodes[id.0];
        if n.grad.is_none() {
            n.grad = Some(vec![F::zero(); n.rows * n.cols]);
        }
    }

    fn add_into(&mut self, id: NodeId, contrib: &[F]) {
        self.ensure_grad(id);
        let buf = self.nodes[id.0].grad.as_mut().unwrap();
        for (b, &c) in buf.iter_mut().zip(contrib) {
            *b = *b + c;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients of `Param` and `Var`
    /// leaves accumulate across repeated calls; interior gradients are
    /// cleared at the start of each call.
    pub fn backward(&mut self, loss: NodeId) -> TensorResult<()> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(TensorError::Contract(format!(
                "backward: loss must be scalar, got {r}x{c}"
            )));
        }
        for n in &mut self.nodes {
            if !matches!(n.payload, Payload::Param(_) | Payload::Var) {
                n.grad = None;
            }
        }
        self.ensure_grad(loss);
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = F::one();

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].payload, Payload::Param(_) | Payload::Var) {
                continue;
            }
            let Some(g) = std::mem::take(&mut self.nodes[i].grad) else {
                continue;
            };
            self.propagate(NodeId(i), &g)?;
            // Interior gradients are kept only while the sweep is between the
            // node and its parents; leaves retain theirs.
            if i == loss.0 {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    fn propagate(&mut self, id: NodeId, g: &[F]) -> TensorResult<()> {
        let payload = std::mem::replace(&mut self.nodes[id.0].payload, Payload::Input);
        match &payload {
            Payload::Param(_) | Payload::Input | Payload::Var => {}
            Payload::Add(a, b) => {
                if self.needs(*a) {
                    self.add_into(*a, g);
                }
                if self.needs(*b) {
                    self.add_into(*b, g);
                }
            }
            Payload::Sub(a, b) => {
                if self.needs(*a) {
                    self.add_into(*a, g);
                }
                if self.needs(*b) {
                    let neg: Vec<F> = g.iter().map(|&x| -x).collect();
                    self.add_into(*b, &neg);
                }
            }
            Payload::Mul(a, b) => {
                if self.needs(*a) {
                    let c: Vec<F> = g
                        .iter()
                        .zip(self.value_data(*b))
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.add_into(*a, &c);
                }
                if self.needs(*b) {
                    let c: Vec<F> = g
                        .iter()
                        .zip(self.value_data(*a))
                        .map(|(&x, &y)| x * y)
                        .collect();
                    self.add_into(*b, &c);
                }
            }
            Payload::Div(a, b) => {
                if self.needs(*a) {
                    let c: Vec<F> = g
                        .iter()
                        .zip(self.value_data(*b))
                        .map(|(&x, &y)| x / y)
                        .collect();
                    self.add_into(*a, &c);
                }
                if self.needs(*b) {
                    let c: Vec<F> = g
                        .iter()
                        .zip(self.value_data(*a).iter().zip(self.value_data(*b)))
                        .map(|(&x, (&va, &vb))| -x * va / (vb * vb))
                        .collect();
                    self.add_into(*b, &c);
                }
            }
            Payload::AddScalar(a) => {
                if self.needs(*a) {
                    self.add_into(*a, g);
                }
            }
            Payload::MulScalar(a, c) => {
                if self.needs(*a) {
                    let contrib: Vec<F> = g.iter().map(|&x| x * *c).collect();
                    self.add_into(*a, &contrib);
                }
            }
            Payload::Matmul(a, b) => {
                let (m, k) = self.dims(*a);
                let (_, n) = self.dims(*b);
                if self.needs(*a) {
                    let mut da = vec![F::zero(); m * k];
                    mm_nt_acc(&mut da, g, self.value_data(*b), m, n, k);
                    self.add_into(*a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![F::zero(); k * n];
                    mm_tn_acc(&mut db, self.value_data(*a), g, m, k, n);
                    self.add_into(*b, &db);
                }
            }
            Payload::AddBias(x, bias) => {
                let (_, n) = self.dims(*x);
                if self.needs(*x) {
                    self.add_into(*x, g);
                }
                if self.needs(*bias) {
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                    self.add_into(*bias, &db);
                }
            }
            Payload::Relu(a) => {
                if self.needs(*a) {
                    let c: Vec<F> = g
                        .iter()
                        .zip(self.value_data(*a))
                        .map(|(&x, &v)| if v > F::zero() { x } else { F::zero() })
                        .collect();
                    self.add_into(*a, &c);
                }
            }
            Payload::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = self.value(id).data();
                    let c: Vec<F> = g
                        .iter()
                        .zip(y)
                        .map(|(&x, &s)| x * s * (F::one() - s))
                        .collect();
                    self.add_into(*a, &c);
                }
            }
            Payload::Tanh(a) => {
                if self.needs(*a) {
                    let y = self.value(id).data();
                    let c: Vec<F> = g
                        .iter()
                        .zip(y)
                        .map(|(&x, &t)| x * (F::one() - t * t))
                        .collect();
                    self.add_into(*a, &c);
                }
            }
            Payload::Sqrt(a) => {
                if self.needs(*a) {
                    let y = self.value(id).data();
                    let two = F::of(2.0);
                    let c: Vec<F> = g.iter().zip(y).map(|(&x, &s)| x / (two * s)).collect();
                    self.add_into(*a, &c);
                }
            }
            Payload::LogSoftmax(a) => {
                if self.needs(*a) {
                    let (_, n) = self.dims(*a);
                    let y = self.value(id).data();
                    let mut c = vec![F::zero(); y.len()];
                    for (r, grow) in g.chunks(n).enumerate() {
                        let gsum = grow.iter().fold(F::zero(), |s, &x| s + x);
                        for j in 0..n {
                            let sm = y[r * n + j].exp();
                            c[r * n + j] = grow[j] - sm * gsum;
                        }
                    }
                    self.add_into(*a, &c);
                }
            }
            Payload::Dropout { x, mask } => {
                if self.needs(*x) {
                    let c: Vec<F> = g.iter().zip(mask).map(|(&v, &k)| v * k).collect();
                    self.add_into(*x, &c);
                }
            }
            Payload::MeanRows(x) => {
                if self.needs(*x) {
                    let (m, n) = self.dims(*x);
                    let inv = F::of(1.0 / m as f64);
                    let mut c = vec![F::zero(); m * n];
                    for r in 0..m {
                        for j in 0..n {
                            c[r * n + j] = g[j] * inv;
                        }
                    }
                    self.add_into(*x, &c);
                }
            }
            Payload::ConcatRows(xs) => {
                let mut offset = 0;
                for &x in xs {
                    let (r, n) = self.dims(x);
                    if self.needs(x) {
                        self.add_into(x, &g[offset..offset + r * n]);
                    }
                    offset += r * n;
                }
            }
            Payload::ConcatCols(xs) => {
                let (m, total) = self.dims(id);
                let mut offset = 0;
                for &x in xs {
                    let (_, c) = self.dims(x);
                    if self.needs(x) {
                        let mut part = vec![F::zero(); m * c];
                        for r in 0..m {
                            part[r * c..(r + 1) * c]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        self.add_into(x, &part);
                    }
                    offset += c;
                }
            }
            Payload::SliceRows { x, start } => {
                if self.needs(*x) {
                    let (m, n) = self.dims(*x);
                    let mut c = vec![F::zero(); m * n];
                    c[start * n..start * n + g.len()].copy_from_slice(g);
                    self.add_into(*x, &c);
                }
            }
            Payload::GatherRows { x, indices } => {
                if self.needs(*x) {
                    let (m, n) = self.dims(*x);
                    let mut c = vec![F::zero(); m * n];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..n {
                            c[i * n + j] = c[i * n + j] + g[k * n + j];
                        }
                    }
                    self.add_into(*x, &c);
                }
            }
            Payload::GatherEntries { x, indices } => {
                if self.needs(*x) {
                    let (m, n) = self.dims(*x);
                    let mut c = vec![F::zero(); m * n];
                    for (k, &(r, col)) in indices.iter().enumerate() {
                        c[r * n + col] = c[r * n + col] + g[k];
                    }
                    self.add_into(*x, &c);
                }
            }
            Payload::Unfold { x, width } => {
                if self.needs(*x) {
                    let (m, n) = self.dims(*x);
                    let out_rows = m - width + 1;
                    let mut c = vec![F::zero(); m * n];
                    for r in 0..out_rows {
                        for wi in 0..*width {
                            for j in 0..n {
                                let idx = (r + wi) * n + j;
                                c[idx] = c[idx] + g[r * width * n + wi * n + j];
                            }
                        }
                    }
                    self.add_into(*x, &c);
                }
            }
            Payload::PadRowsTop { x, rows } => {
                if self.needs(*x) {
                    let (_, n) = self.dims(*x);
                    self.add_into(*x, &g[rows * n..]);
                }
            }
            Payload::Sum(x) => {
                if self.needs(*x) {
                    let (m, n) = self.dims(*x);
                    let c = vec![g[0]; m * n];
                    self.add_into(*x, &c);
                }
            }
            Payload::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (m, n) = self.dims(*x);
                if self.needs(*gamma) {
                    let mut dg = vec![F::zero(); n];
                    for (r, grow) in g.chunks(n).enumerate() {
                        for j in 0..n {
                            dg[j] = dg[j] + grow[j] * xhat[r * n + j];
                        }
                    }
                    self.add_into(*gamma, &dg);
                }
                if self.needs(*beta) {
                    let mut db = vec![F::zero(); n];
                    for grow in g.chunks(n) {
                        for (d, &v) in db.iter_mut().zip(grow) {
                            *d = *d + v;
                        }
                    }
                    self.add_into(*beta, &db);
                }
                if self.needs(*x) {
                    let gv = self.value_data(*gamma).to_vec();
                    let mut c = vec![F::zero(); m * n];
                    if *train {
                        let inv_m = F::of(1.0 / m as f64);
                        let mut mean_g = vec![F::zero(); n];
                        let mut mean_gx = vec![F::zero(); n];
                        for (r, grow) in g.chunks(n).enumerate() {
                            for j in 0..n {
                                mean_g[j] = mean_g[j] + grow[j];
                                mean_gx[j] = mean_gx[j] + grow[j] * xhat[r * n + j];
                            }
                        }
                        for j in 0..n {
                            mean_g[j] = mean_g[j] * inv_m;
                            mean_gx[j] = mean_gx[j] * inv_m;
                        }
                        for r in 0..m {
                            for j in 0..n {
                                c[r * n + j] = gv[j]
                                    * inv_std[j]
                                    * (g[r * n + j] - mean_g[j] - xhat[r * n + j] * mean_gx[j]);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for j in 0..n {
                                c[r * n + j] = g[r * n + j] * gv[j] * inv_std[j];
                            }
                        }
                    }
                    self.add_into(*x, &c);
                }
            }
            Payload::BceWithLogits { z, target } => {
                if self.needs(*z) {
                    let zv = self.value_data(*z);
                    let c: Vec<F> = zv
                        .iter()
                        .zip(target)
                        .map(|(&zi, &yi)| g[0] * (sigmoid(zi) - yi))
                        .collect();
                    self.add_into(*z, &c);
                }
            }
        }
        self.nodes[id.0].payload = payload;
        Ok(())
    }

    /// Drain accumulated gradients of all `Param` leaves.
    pub fn take_param_grads(&mut self) -> Vec<(ParamId, Vec<F>)> {
        let mut out = Vec::new();
        for n in &mut self.nodes {
            if let Payload::Param(pid) = n.payload {
                if let Some(g) = std::mem::take(&mut n.grad) {
                    out.push((pid, g));
                }
            }
        }
        out
    }
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `C = A (m x k) . B (k x n)`.
fn mm<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &a_il) in arow.iter().enumerate() {
            if a_il == F::zero() {
                continue;
            }
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + a_il * bv;
            }
        }
    }
    c
}

/// `dA (m x k) += dC (m x n) . B(k x n)^T`.
fn mm_nt_acc<F: Real>(da: &mut [F], dc: &[F], b: &[F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        let darow = &mut da[i * k..(i + 1) * k];
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            let mut s = F::zero();
            for (&x, &y) in dcrow.iter().zip(brow) {
                s = s + x * y;
            }
            darow[l] = darow[l] + s;
        }
    }
}

/// `dB (k x n) += A (m x k)^T . dC (m x n)`.
fn mm_tn_acc<F: Real>(db: &mut [F], a: &[F], dc: &[F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let dcrow = &dc[i * n..(i + 1) * n];
        for (l, &a_il) in arow.iter().enumerate() {
            if a_il == F::zero() {
                continue;
            }
            let dbrow = &mut db[l * n..(l + 1) * n];
            for (d, &x) in dbrow.iter_mut().zip(dcrow) {
                *d = *d + a_il * x;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_store() -> ParamStore<f64> {
        ParamStore::new()
    }

    #[test]
    fn relu_forward_backward_worked_example() {
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g
            .var(Tensor::from_vec(&[1, 3], vec![-1.0, 0.0, 2.0]).unwrap())
            .unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value_data(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::scalar(0.0)).unwrap();
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value_data(y), &[0.5]);
    }

    #[test]
    fn matmul_grad_of_linear_is_input() {
        // loss = sum(W . x) => dW rows are x^T.
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Train);
        let w = g
            .var(Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let x = g
            .input(Tensor::from_vec(&[3, 1], vec![7.0, 8.0, 9.0]).unwrap())
            .unwrap();
        let y = g.matmul(w, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[7.0, 8.0, 9.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn repeated_backward_doubles_leaf_grads() {
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g
            .var(Tensor::from_vec(&[1, 2], vec![3.0, -2.0]).unwrap())
            .unwrap();
        let y = g.mul(x, x).unwrap();
        let loss = g.sum(y).unwrap();
        g.backward(loss).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(loss).unwrap();
        let second = g.grad(x).unwrap().to_vec();
        assert_eq!(second, first.iter().map(|v| v * 2.0).collect::<Vec<_>>());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.var(Tensor::zeros(&[2, 2])).unwrap();
        assert!(matches!(
            g.backward(x),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn conv1d_matches_naive_sliding_window() {
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Eval);
        // length 5, 1 channel; width-3 kernel -> length 3 output.
        let xv = [0.5, -1.0, 2.0, 0.0, 1.5];
        let kv = [1.0, -2.0, 0.5];
        let x = g.input(Tensor::from_vec(&[5, 1], xv.to_vec()).unwrap()).unwrap();
        let w = g.input(Tensor::from_vec(&[3, 1], kv.to_vec()).unwrap()).unwrap();
        let b = g.input(Tensor::from_vec(&[1, 1], vec![0.25]).unwrap()).unwrap();
        let y = g.conv1d(x, w, b, 3).unwrap();
        assert_eq!(g.dims(y), (3, 1));
        for r in 0..3 {
            let direct: f64 =
                (0..3).map(|i| xv[r + i] * kv[i]).sum::<f64>() + 0.25;
            assert!((g.value_data(y)[r] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn conv1d_pads_short_inputs() {
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::from_vec(&[2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        let w = g.input(Tensor::from_vec(&[4, 1], vec![1.0; 4]).unwrap()).unwrap();
        let b = g.input(Tensor::from_vec(&[1, 1], vec![0.0]).unwrap()).unwrap();
        let y = g.conv1d(x, w, b, 4).unwrap();
        assert_eq!(g.dims(y), (1, 1));
        assert_eq!(g.value_data(y), &[3.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Eval);
        let a = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        assert!(err.to_string().contains("2x3"));
    }

    #[test]
    fn dropout_identity_cases() {
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = g.dropout(x, 0.5).unwrap();
        assert_eq!(x, y); // eval mode ignores p
        let mut g = Graph::new(&store, Mode::Train);
        let x = g.input(Tensor::from_vec(&[1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = g.dropout(x, 0.0).unwrap();
        assert_eq!(x, y); // p = 0 is the identity
    }

    #[test]
    fn dropout_masks_are_counter_deterministic() {
        let store = empty_store();
        let run = || {
            let mut g = Graph::with_dropout_seed(&store, Mode::Train, 42);
            let x = g.input(Tensor::filled(&[4, 4], 1.0)).unwrap();
            let y = g.dropout(x, 0.5).unwrap();
            g.value_data(y).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gather_rows_accumulates_duplicate_indices() {
        let store = empty_store();
        let mut g = Graph::new(&store, Mode::Train);
        let x = g
            .var(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let y = g.gather_rows(x, &[0, 0, 1]).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
