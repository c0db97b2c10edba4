//! Reverse-mode automatic differentiation over a recorded op graph.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! replays the record in reverse and produces exact gradients of a scalar
//! loss with respect to every node. The op set is exactly what the model
//! needs: causal dilated 1-d convolution, affine layers, pointwise
//! nonlinearities, row normalization, gather/concat/slice plumbing, squared
//! error reductions, and stop-gradient.
//!
//! Node ids are created in topological order, so a single reverse sweep
//! with a fixed accumulation order yields deterministic gradients.

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    CausalConv {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dilation: usize,
    },
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Relu(NodeId),
    Softplus(NodeId),
    Abs(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    SumAll(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    GatherRows {
        x: NodeId,
        indices: Vec<usize>,
    },
    NormalizeRows {
        x: NodeId,
        epsilon: f64,
    },
    /// Forward identity whose parent is deliberately not recorded: the
    /// backward sweep must never reach anything upstream of it.
    StopGradient,
    /// Mean over every entry of the squared difference.
    MeanSquaredError {
        pred: NodeId,
        target: NodeId,
    },
    /// Mean over rows of the per-row squared Euclidean distance.
    RowMeanSquaredDistance {
        a: NodeId,
        b: NodeId,
    },
    /// Weighted sum of scalar nodes.
    WeightedSum(Vec<(NodeId, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Causal dilated 1-d convolution with left zero padding.
    ///
    /// `x` is T x C_in, `w` is C_out x C_in x k, `b` is C_out. Output
    /// row t sums w[:, :, i] * x[t - (k-1-i)*dilation] over taps i, with
    /// out-of-range inputs treated as zero, so the output has length T and
    /// depends only on frames <= t.
    pub fn causal_conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        dilation: usize,
    ) -> Result<NodeId> {
        let value = conv1d_value(
            self.value(x),
            self.value(w),
            b.map(|id| self.value(id)),
            dilation,
        )?;
        Ok(self.push(value, Op::CausalConv { x, w, b, dilation }))
    }

    /// y = x . w + b with x: M x I, w: I x O, b: O.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let value = affine_value(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(value, Op::Affine { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(softplus);
        self.push(value, Op::Softplus(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(f64::abs);
        self.push(value, Op::Abs(x))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_same_shape(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_same_shape(self.value(a), self.value(b), "sub", |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = zip_same_shape(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let value = self.value(x).map(|v| c * v);
        self.push(value, Op::Scale(x, c))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::SumAll(x))
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidData("concat_cols: no parts".into()));
        }
        let rows = self.value(parts[0]).rows();
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                if t.rows() != rows {
                    return Err(Error::shape(
                        "concat_cols",
                        &[rows, t.cols()],
                        t.shape(),
                    ));
                }
                data.extend_from_slice(t.row(r));
            }
        }
        let value = Tensor::new(vec![rows, total_cols], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(x);
        if start + len > t.cols() {
            return Err(Error::shape(
                "slice_cols",
                &[t.rows(), start + len],
                t.shape(),
            ));
        }
        let value = t.slice_cols(start, len);
        Ok(self.push(value, Op::SliceCols { x, start, len }))
    }

    pub fn gather_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId> {
        let t = self.value(x);
        let cols = t.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= t.rows() {
                return Err(Error::InvalidData(format!(
                    "gather_rows: index {i} out of range for {} rows",
                    t.rows()
                )));
            }
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![indices.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Scales each row to unit L2 norm; rows with norm below `epsilon` are
    /// divided by `epsilon` instead, so the zero vector maps to itself.
    pub fn normalize_rows(&mut self, x: NodeId, epsilon: f64) -> NodeId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = row_of(t, r);
            let norm = l2_norm(row).max(epsilon);
            data.extend(row.iter().map(|&v| v / norm));
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("shape preserved");
        self.push(value, Op::NormalizeRows { x, epsilon })
    }

    /// Identity in the forward pass, zero contribution in the backward pass.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(value, Op::StopGradient)
    }

    pub fn mean_squared_error(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(Error::shape("mean_squared_error", p.shape(), t.shape()));
        }
        let n = p.len() as f64;
        let sum: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Tensor::scalar(sum / n), Op::MeanSquaredError { pred, target }))
    }

    /// Mean over rows of the squared Euclidean distance between row pairs.
    pub fn row_mean_squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        let tb = self.value(b);
        if ta.shape() != tb.shape() {
            return Err(Error::shape("row_mean_squared_distance", ta.shape(), tb.shape()));
        }
        let rows = ta.rows() as f64;
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(
            Tensor::scalar(sum / rows),
            Op::RowMeanSquaredDistance { a, b },
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut total = 0.0;
        for &(id, w) in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(Error::InvalidData(
                    "weighted_sum: all terms must be scalars".into(),
                ));
            }
            total += w * v.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse-mode gradients of the recorded scalar `loss` with respect to
    /// every node it depends on. Nodes unreachable from the loss (including
    /// anything behind a stop-gradient) report an exactly-zero gradient.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidData(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn accumulate_parents(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::CausalConv { x, w, b, dilation } => {
                let (dx, dw, db) = conv1d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *dilation,
                );
                add_into(grads, *x, &dx, self.value(*x).shape());
                add_into(grads, *w, &dw, self.value(*w).shape());
                if let Some(b) = b {
                    add_into(grads, *b, &db, self.value(*b).shape());
                }
            }
            Op::Affine { x, w, b } => {
                let (dx, dw, db) = affine_backward(self.value(*x), self.value(*w), g);
                add_into(grads, *x, &dx, self.value(*x).shape());
                add_into(grads, *w, &dw, self.value(*w).shape());
                add_into(grads, *b, &db, self.value(*b).shape());
            }
            Op::Relu(x) => {
                let xs = self.value(*x);
                let dx: Vec<f64> = xs
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 })
                    .collect();
                add_into(grads, *x, &dx, xs.shape());
            }
            Op::Softplus(x) => {
                let xs = self.value(*x);
                let dx: Vec<f64> = xs
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| gg * sigmoid(v))
                    .collect();
                add_into(grads, *x, &dx, xs.shape());
            }
            Op::Abs(x) => {
                let xs = self.value(*x);
                let dx: Vec<f64> = xs
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| if v >= 0.0 { gg } else { -gg })
                    .collect();
                add_into(grads, *x, &dx, xs.shape());
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g.data(), self.value(*a).shape());
                add_into(grads, *b, g.data(), self.value(*b).shape());
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g.data(), self.value(*a).shape());
                let neg: Vec<f64> = g.data().iter().map(|&v| -v).collect();
                add_into(grads, *b, &neg, self.value(*b).shape());
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = self
                    .value(*b)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| v * gg)
                    .collect();
                let db: Vec<f64> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gg)| v * gg)
                    .collect();
                add_into(grads, *a, &da, self.value(*a).shape());
                add_into(grads, *b, &db, self.value(*b).shape());
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.data().iter().map(|&v| c * v).collect();
                add_into(grads, *x, &dx, self.value(*x).shape());
            }
            Op::SumAll(x) => {
                let gg = g.item();
                let dx = vec![gg; self.value(*x).len()];
                add_into(grads, *x, &dx, self.value(*x).shape());
            }
            Op::ConcatCols(parts) => {
                let rows = self.value(NodeId(id)).rows();
                let total_cols = self.value(NodeId(id)).cols();
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    let mut dp = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let src = &g.data()[r * total_cols + offset..r * total_cols + offset + cols];
                        dp[r * cols..(r + 1) * cols].copy_from_slice(src);
                    }
                    add_into(grads, p, &dp, self.value(p).shape());
                    offset += cols;
                }
            }
            Op::SliceCols { x, start, len } => {
                let xt = self.value(*x);
                let (rows, cols) = (xt.rows(), xt.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    for c in 0..*len {
                        dx[r * cols + start + c] = g.data()[r * len + c];
                    }
                }
                add_into(grads, *x, &dx, xt.shape());
            }
            Op::GatherRows { x, indices } => {
                let xt = self.value(*x);
                let cols = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g.data()[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dx[i * cols + c] += src[c];
                    }
                }
                add_into(grads, *x, &dx, xt.shape());
            }
            Op::NormalizeRows { x, epsilon } => {
                let xt = self.value(*x);
                let yt = self.value(NodeId(id));
                let rows = xt.rows();
                let cols = xt.cols();
                let mut dx = vec![0.0; xt.len()];
                for r in 0..rows {
                    let xrow = row_of(xt, r);
                    let yrow = row_of(yt, r);
                    let grow = &g.data()[r * cols..(r + 1) * cols];
                    let norm = l2_norm(xrow);
                    let out = &mut dx[r * cols..(r + 1) * cols];
                    if norm >= *epsilon {
                        let dot: f64 = yrow.iter().zip(grow).map(|(&y, &gg)| y * gg).sum();
                        for c in 0..cols {
                            out[c] = (grow[c] - yrow[c] * dot) / norm;
                        }
                    } else {
                        for c in 0..cols {
                            out[c] = grow[c] / epsilon;
                        }
                    }
                }
                add_into(grads, *x, &dx, xt.shape());
            }
            Op::StopGradient => {}
            Op::MeanSquaredError { pred, target } => {
                let p = self.value(*pred);
                let t = self.value(*target);
                let scale = 2.0 * g.item() / p.len() as f64;
                let dp: Vec<f64> = p
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(&a, &b)| scale * (a - b))
                    .collect();
                let dt: Vec<f64> = dp.iter().map(|&v| -v).collect();
                add_into(grads, *pred, &dp, p.shape());
                add_into(grads, *target, &dt, t.shape());
            }
            Op::RowMeanSquaredDistance { a, b } => {
                let ta = self.value(*a);
                let tb = self.value(*b);
                let scale = 2.0 * g.item() / ta.rows() as f64;
                let da: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| scale * (x - y))
                    .collect();
                let db: Vec<f64> = da.iter().map(|&v| -v).collect();
                add_into(grads, *a, &da, ta.shape());
                add_into(grads, *b, &db, tb.shape());
            }
            Op::WeightedSum(terms) => {
                let gg = g.item();
                for &(t, w) in terms {
                    add_into(grads, t, &[w * gg], self.value(t).shape());
                }
            }
        }
    }
}

pub struct Gradients {
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to a node; exactly zero if the loss does not
    /// reach it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }

    /// True if backward never touched the node (e.g. behind stop-gradient).
    pub fn is_untouched(&self, id: NodeId) -> bool {
        self.grads[id.0].is_none()
    }
}

fn add_into(grads: &mut [Option<Tensor>], id: NodeId, delta: &[f64], shape: &[usize]) {
    let slot = &mut grads[id.0];
    match slot {
        Some(t) => {
            for (dst, &src) in t.data_mut().iter_mut().zip(delta) {
                *dst += src;
            }
        }
        None => {
            let mut t = Tensor::zeros(shape);
            t.data_mut().copy_from_slice(delta);
            *slot = Some(t);
        }
    }
}

fn row_of(t: &Tensor, r: usize) -> &[f64] {
    let cols = t.cols();
    &t.data()[r * cols..(r + 1) * cols]
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // ln(1 + e^x) without overflow.
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn zip_same_shape(
    a: &Tensor,
    b: &Tensor,
    context: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(context, a.shape(), b.shape()));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Forward causal convolution, usable without a tape.
pub fn conv1d_value(x: &Tensor, w: &Tensor, b: Option<&Tensor>, dilation: usize) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 3 {
        return Err(Error::shape("causal_conv1d", &[0, 0], x.shape()));
    }
    let (t_len, c_in) = (x.shape()[0], x.shape()[1]);
    let (c_out, w_cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if w_cin != c_in {
        return Err(Error::shape(
            "causal_conv1d weights",
            &[c_out, c_in, k],
            w.shape(),
        ));
    }
    if let Some(b) = b {
        if b.shape() != [c_out] {
            return Err(Error::shape("causal_conv1d bias", &[c_out], b.shape()));
        }
    }
    // Transposed weight scratch (o, i, ci) keeps the inner dot contiguous.
    let wt = transpose_weights(w);
    let mut out = vec![0.0; t_len * c_out];
    let xd = x.data();
    for t in 0..t_len {
        let orow = &mut out[t * c_out..(t + 1) * c_out];
        if let Some(b) = b {
            orow.copy_from_slice(b.data());
        }
        for i in 0..k {
            let offset = (k - 1 - i) * dilation;
            if offset > t {
                continue;
            }
            let tau = t - offset;
            let xrow = &xd[tau * c_in..(tau + 1) * c_in];
            for (o, orow_v) in orow.iter_mut().enumerate() {
                let wrow = &wt[(o * k + i) * c_in..(o * k + i + 1) * c_in];
                let mut acc = 0.0;
                for (wv, xv) in wrow.iter().zip(xrow) {
                    acc += wv * xv;
                }
                *orow_v += acc;
            }
        }
    }
    Tensor::new(vec![t_len, c_out], out)
}

fn transpose_weights(w: &Tensor) -> Vec<f64> {
    let (c_out, c_in, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let wd = w.data();
    let mut wt = vec![0.0; c_out * k * c_in];
    for o in 0..c_out {
        for ci in 0..c_in {
            for i in 0..k {
                wt[(o * k + i) * c_in + ci] = wd[(o * c_in + ci) * k + i];
            }
        }
    }
    wt
}

fn conv1d_backward(
    x: &Tensor,
    w: &Tensor,
    grad_out: &Tensor,
    dilation: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (t_len, c_in) = (x.shape()[0], x.shape()[1]);
    let (c_out, _, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let wt = transpose_weights(w);
    let gd = grad_out.data();
    let xd = x.data();

    let mut dx = vec![0.0; t_len * c_in];
    let mut dwt = vec![0.0; c_out * k * c_in];
    let mut db = vec![0.0; c_out];

    for t in 0..t_len {
        let grow = &gd[t * c_out..(t + 1) * c_out];
        for (o, &gv) in grow.iter().enumerate() {
            db[o] += gv;
        }
        for i in 0..k {
            let offset = (k - 1 - i) * dilation;
            if offset > t {
                continue;
            }
            let tau = t - offset;
            let xrow = &xd[tau * c_in..(tau + 1) * c_in];
            let dxrow = &mut dx[tau * c_in..(tau + 1) * c_in];
            for (o, &gv) in grow.iter().enumerate() {
                if gv == 0.0 {
                    continue;
                }
                let wrow = &wt[(o * k + i) * c_in..(o * k + i + 1) * c_in];
                let dwrow = &mut dwt[(o * k + i) * c_in..(o * k + i + 1) * c_in];
                for ci in 0..c_in {
                    dxrow[ci] += gv * wrow[ci];
                    dwrow[ci] += gv * xrow[ci];
                }
            }
        }
    }

    // Un-transpose the weight gradient back to (o, ci, i).
    let mut dw = vec![0.0; c_out * c_in * k];
    for o in 0..c_out {
        for ci in 0..c_in {
            for i in 0..k {
                dw[(o * c_in + ci) * k + i] = dwt[(o * k + i) * c_in + ci];
            }
        }
    }
    (dx, dw, db)
}

/// Forward affine map, usable without a tape.
pub fn affine_value(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || w.ndim() != 2 {
        return Err(Error::shape("affine", &[0, 0], x.shape()));
    }
    let (m, d_in) = (x.shape()[0], x.shape()[1]);
    let (w_in, d_out) = (w.shape()[0], w.shape()[1]);
    if d_in != w_in || b.shape() != [d_out] {
        return Err(Error::shape("affine", &[d_in, d_out], w.shape()));
    }
    let mut out = vec![0.0; m * d_out];
    let xd = x.data();
    let wd = w.data();
    for r in 0..m {
        let orow = &mut out[r * d_out..(r + 1) * d_out];
        orow.copy_from_slice(b.data());
        let xrow = &xd[r * d_in..(r + 1) * d_in];
        for (i, &xv) in xrow.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &wd[i * d_out..(i + 1) * d_out];
            for (ov, &wv) in orow.iter_mut().zip(wrow) {
                *ov += xv * wv;
            }
        }
    }
    Tensor::new(vec![m, d_out], out)
}

fn affine_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (m, d_in) = (x.shape()[0], x.shape()[1]);
    let d_out = w.shape()[1];
    let xd = x.data();
    let wd = w.data();
    let gd = grad_out.data();

    let mut dx = vec![0.0; m * d_in];
    let mut dw = vec![0.0; d_in * d_out];
    let mut db = vec![0.0; d_out];

    for r in 0..m {
        let grow = &gd[r * d_out..(r + 1) * d_out];
        for (o, &gv) in grow.iter().enumerate() {
            db[o] += gv;
        }
        let xrow = &xd[r * d_in..(r + 1) * d_in];
        let dxrow = &mut dx[r * d_in..(r + 1) * d_in];
        for i in 0..d_in {
            let wrow = &wd[i * d_out..(i + 1) * d_out];
            let mut acc = 0.0;
            for (wv, gv) in wrow.iter().zip(grow) {
                acc += wv * gv;
            }
            dxrow[i] += acc;
            let dwrow = &mut dw[i * d_out..(i + 1) * d_out];
            let xv = xrow[i];
            if xv != 0.0 {
                for (dwv, gv) in dwrow.iter_mut().zip(grow) {
                    *dwv += xv * gv;
                }
            }
        }
    }
    (dx, dw, db)
}

/// v / max(||v||_2, epsilon), usable without a tape.
pub fn l2_normalize(v: &[f64], epsilon: f64) -> Vec<f64> {
    let norm = l2_norm(v).max(epsilon);
    v.iter().map(|&x| x / norm).collect()
}
