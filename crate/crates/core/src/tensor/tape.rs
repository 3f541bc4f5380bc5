use std::sync::Arc;

use super::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// CSR-style partition of `num_items` consecutive items into segments.
///
/// Segment `s` owns items `offsets[s]..offsets[s + 1]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segments {
    offsets: Arc<[usize]>,
}

impl Segments {
    pub fn new(offsets: Vec<usize>) -> Result<Self> {
        if offsets.first() != Some(&0) {
            return Err(Error::shape("Segments::new", "offsets must start at 0"));
        }
        if offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::shape("Segments::new", "offsets must be nondecreasing"));
        }
        Ok(Self {
            offsets: offsets.into(),
        })
    }

    pub fn num_segments(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_items(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn range(&self, segment: usize) -> std::ops::Range<usize> {
        self.offsets[segment]..self.offsets[segment + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    LeakyRelu(Var, f64),
    Elu(Var, f64),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Segments),
    SegmentWeightedSum(Var, Var, Segments),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        bias: Var,
    },
    MseLoss(Var, Var),
    Sum(Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddBias(a, b)
            | Op::MulScalar(a, b)
            | Op::SegmentWeightedSum(a, b, _)
            | Op::MseLoss(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddConst(a)
            | Op::LeakyRelu(a, _)
            | Op::Elu(a, _)
            | Op::Sigmoid(a)
            | Op::SliceRows(a, _)
            | Op::GatherRows(a, _)
            | Op::SegmentSoftmax(a, _)
            | Op::Sum(a) => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records forward operations in topological order for one backward pass.
///
/// Every forward op checks its output for NaN/Inf and fails with
/// [`Error::NonFinite`] instead of letting the value propagate.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every recorded value.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    ops_visited: usize,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of non-leaf ops whose backward rule ran.
    pub fn ops_visited(&self) -> usize {
        self.ops_visited
    }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[var.0].value;
        if t.shape().len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = gemm(
            self.value(a).data(),
            m,
            k,
            false,
            self.value(b).data(),
            k2,
            n,
            false,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        self.push("add", out, Op::Add(a, b))
    }

    /// `x[N,F] + bias[F]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, f) = self.matrix_dims(x, "add_bias")?;
        let tb = self.value(bias);
        if tb.numel() != f {
            return Err(Error::shape(
                "add_bias",
                format!("bias has {} entries for {f} columns", tb.numel()),
            ));
        }
        let b = tb.data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(f) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        self.push("add_bias", out, Op::AddBias(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push("add_const", out, Op::AddConst(x))
    }

    /// `s · x` for a one-element tensor `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(Error::shape("mul_scalar", format!("scalar has shape {:?}", ts.shape())));
        }
        let sv = ts.data()[0];
        let out = self.value(x).map(|v| v * sv);
        self.push("mul_scalar", out, Op::MulScalar(x, s))
    }

    /// Elementwise `max(x, slope·x)`; the derivative at 0 is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push("leaky_relu", out, Op::LeakyRelu(x, slope))
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { alpha * v.exp_m1() });
        self.push("elu", out, Op::Elu(x, alpha))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let (n, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("row counts {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..n {
                out[i * total + col..i * total + col + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            col += w;
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
        )
    }

    /// Rows `start..end` of a matrix (or entries of a vector).
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        if start > end || end > rows {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {rows} rows")));
        }
        let c = t.cols();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let data = t.data()[start * c..end * c].to_vec();
        self.push("slice_rows", Tensor::new(shape, data)?, Op::SliceRows(x, start))
    }

    /// `out[e] = x[index[e]]`, row-wise.
    pub fn gather_rows(&mut self, x: Var, index: Arc<[usize]>) -> Result<Var> {
        let t = self.value(x);
        let (rows, c) = (t.rows(), t.cols());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} >= {rows}")));
        }
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index.iter() {
            data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            shape.push(index.len());
        } else {
            shape[0] = index.len();
        }
        self.push("gather_rows", Tensor::new(shape, data)?, Op::GatherRows(x, index))
    }

    /// Softmax within each segment, stabilised by subtracting the segment max.
    pub fn segment_softmax(&mut self, logits: Var, segments: &Segments) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != segments.num_items() {
            return Err(Error::shape(
                "segment_softmax",
                format!("{} logits for {} segment items", t.numel(), segments.num_items()),
            ));
        }
        let x = t.data();
        let mut out = vec![0.0; x.len()];
        for s in 0..segments.num_segments() {
            let r = segments.range(s);
            if r.is_empty() {
                return Err(Error::EmptySegment {
                    op: "segment_softmax",
                    segment: s,
                });
            }
            let max = x[r.clone()].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in r.clone() {
                let v = (x[e] - max).exp();
                out[e] = v;
                sum += v;
            }
            for o in &mut out[r] {
                *o /= sum;
            }
        }
        let shape = t.shape().to_vec();
        self.push(
            "segment_softmax",
            Tensor::new(shape, out)?,
            Op::SegmentSoftmax(logits, segments.clone()),
        )
    }

    /// `out[n] = Σ_{e ∈ segment n} weights[e] · values[e]`.
    pub fn segment_weighted_sum(
        &mut self,
        values: Var,
        weights: Var,
        segments: &Segments,
    ) -> Result<Var> {
        let tv = self.value(values);
        let tw = self.value(weights);
        let (e, f) = (tv.rows(), tv.cols());
        if e != segments.num_items() || tw.numel() != e {
            return Err(Error::shape(
                "segment_weighted_sum",
                format!(
                    "{e} value rows, {} weights, {} segment items",
                    tw.numel(),
                    segments.num_items()
                ),
            ));
        }
        let n = segments.num_segments();
        let mut out = vec![0.0; n * f];
        let (v, w) = (tv.data(), tw.data());
        for s in 0..n {
            let orow = &mut out[s * f..(s + 1) * f];
            for idx in segments.range(s) {
                let wv = w[idx];
                for (o, x) in orow.iter_mut().zip(&v[idx * f..(idx + 1) * f]) {
                    *o += wv * x;
                }
            }
        }
        self.push(
            "segment_weighted_sum",
            Tensor::new(vec![n, f], out)?,
            Op::SegmentWeightedSum(values, weights, segments.clone()),
        )
    }

    /// Row-wise layer normalisation with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, f) = self.matrix_dims(x, "layer_norm")?;
        if f == 0 {
            return Err(Error::shape("layer_norm", "zero-width rows"));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != f || tb.numel() != f {
            return Err(Error::shape(
                "layer_norm",
                format!("gain/bias sizes {}/{} for width {f}", tg.numel(), tb.numel()),
            ));
        }
        let (g, b) = (tg.data(), tb.data());
        let xv = self.value(x).data();
        let mut xhat = vec![0.0; n * f];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * f];
        for i in 0..n {
            let row = &xv[i * f..(i + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..f {
                let h = (row[j] - mean) * inv;
                xhat[i * f + j] = h;
                out[i * f + j] = h * g[j] + b[j];
            }
        }
        self.push(
            "layer_norm",
            Tensor::new(vec![n, f], out)?,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
        )
    }

    /// Mean of squared differences, returned as a one-element tensor.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.numel() != tt.numel() {
            return Err(Error::shape(
                "mse_loss",
                format!("{:?} vs {:?}", tp.shape(), tt.shape()),
            ));
        }
        if tp.numel() == 0 {
            return Err(Error::EmptyInput("mse_loss"));
        }
        let m = tp.numel() as f64;
        let loss = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / m;
        self.push("mse_loss", Tensor::scalar(loss), Op::MseLoss(pred, target))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse pass from a scalar. A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward(
                "backward already ran on this tape; record a new forward pass".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        let mut ops_visited = 0;

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            ops_visited += 1;
            for (input, g) in self.local_grads(idx, &gy) {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(gy);
        }

        Ok(Gradients { grads, ops_visited })
    }

    fn local_grads(&self, idx: usize, gy: &Tensor) -> Vec<(Var, Tensor)> {
        let node = &self.nodes[idx];
        let y = &node.value;
        let like = |v: Var, data: Vec<f64>| {
            Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
        };
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let da = gemm(gy.data(), m, n, false, tb.data(), k, n, true);
                let db = gemm(ta.data(), m, k, true, gy.data(), m, n, false);
                vec![(*a, like(*a, da)), (*b, like(*b, db))]
            }
            Op::Add(a, b) => vec![(*a, gy.clone()), (*b, gy.clone())],
            Op::AddBias(x, bias) => {
                let f = y.cols();
                let mut db = vec![0.0; f];
                for row in gy.data().chunks(f) {
                    for (d, g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
                vec![(*x, gy.clone()), (*bias, like(*bias, db))]
            }
            Op::Scale(x, c) => vec![(*x, gy.map(|g| g * c))],
            Op::AddConst(x) => vec![(*x, gy.clone())],
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                let ds: f64 = gy
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| g * v)
                    .sum();
                vec![(*x, gy.map(|g| g * sv)), (*s, like(*s, vec![ds]))]
            }
            Op::LeakyRelu(x, slope) => {
                let d = zip_map(gy.data(), self.value(*x).data(), |g, v| {
                    if v > 0.0 {
                        g
                    } else {
                        g * slope
                    }
                });
                vec![(*x, like(*x, d))]
            }
            Op::Elu(x, alpha) => {
                let d = zip3_map(gy.data(), self.value(*x).data(), y.data(), |g, v, out| {
                    if v > 0.0 {
                        g
                    } else {
                        g * (out + alpha)
                    }
                });
                vec![(*x, like(*x, d))]
            }
            Op::Sigmoid(x) => {
                let d = zip_map(gy.data(), y.data(), |g, s| g * s * (1.0 - s));
                vec![(*x, like(*x, d))]
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (y.rows(), y.cols());
                let mut col = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut d = Vec::with_capacity(n * w);
                    for i in 0..n {
                        d.extend_from_slice(&gy.data()[i * total + col..i * total + col + w]);
                    }
                    col += w;
                    res.push((p, like(p, d)));
                }
                res
            }
            Op::SliceRows(x, start) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                d[start * c..start * c + gy.numel()].copy_from_slice(gy.data());
                vec![(*x, like(*x, d))]
            }
            Op::GatherRows(x, index) => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut d = vec![0.0; tx.numel()];
                for (e, &i) in index.iter().enumerate() {
                    for (acc, g) in d[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&gy.data()[e * c..(e + 1) * c])
                    {
                        *acc += g;
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::SegmentSoftmax(x, segments) => {
                let (s, g) = (y.data(), gy.data());
                let mut d = vec![0.0; s.len()];
                for seg in 0..segments.num_segments() {
                    let r = segments.range(seg);
                    let dot: f64 = r.clone().map(|e| s[e] * g[e]).sum();
                    for e in r {
                        d[e] = s[e] * (g[e] - dot);
                    }
                }
                vec![(*x, like(*x, d))]
            }
            Op::SegmentWeightedSum(values, weights, segments) => {
                let tv = self.value(*values);
                let w = self.value(*weights).data();
                let f = tv.cols();
                let v = tv.data();
                let g = gy.data();
                let mut dv = vec![0.0; v.len()];
                let mut dw = vec![0.0; w.len()];
                for seg in 0..segments.num_segments() {
                    let grow = &g[seg * f..(seg + 1) * f];
                    for e in segments.range(seg) {
                        let vrow = &v[e * f..(e + 1) * f];
                        let mut acc = 0.0;
                        for j in 0..f {
                            dv[e * f + j] = w[e] * grow[j];
                            acc += grow[j] * vrow[j];
                        }
                        dw[e] = acc;
                    }
                }
                vec![(*values, like(*values, dv)), (*weights, like(*weights, dw))]
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            } => {
                let f = y.cols();
                let n = y.rows();
                let gvals = self.value(*gain).data();
                let g = gy.data();
                let mut dx = vec![0.0; n * f];
                let mut dgain = vec![0.0; f];
                let mut dbias = vec![0.0; f];
                let ff = f as f64;
                for i in 0..n {
                    let grow = &g[i * f..(i + 1) * f];
                    let hrow = &xhat[i * f..(i + 1) * f];
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..f {
                        let dh = grow[j] * gvals[j];
                        sum_dh += dh;
                        sum_dh_h += dh * hrow[j];
                        dgain[j] += grow[j] * hrow[j];
                        dbias[j] += grow[j];
                    }
                    for j in 0..f {
                        let dh = grow[j] * gvals[j];
                        dx[i * f + j] = inv_std[i] / ff * (ff * dh - sum_dh - hrow[j] * sum_dh_h);
                    }
                }
                vec![
                    (*x, like(*x, dx)),
                    (*gain, like(*gain, dgain)),
                    (*bias, like(*bias, dbias)),
                ]
            }
            Op::MseLoss(pred, target) => {
                let (p, t) = (self.value(*pred).data(), self.value(*target).data());
                let scale = 2.0 * gy.data()[0] / p.len() as f64;
                let dp: Vec<f64> = p.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                let dt: Vec<f64> = dp.iter().map(|v| -v).collect();
                vec![(*pred, like(*pred, dp)), (*target, like(*target, dt))]
            }
            Op::Sum(x) => {
                let g0 = gy.data()[0];
                vec![(*x, self.value(*x).map(|_| g0))]
            }
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn zip3_map(a: &[f64], b: &[f64], c: &[f64], f: impl Fn(f64, f64, f64) -> f64) -> Vec<f64> {
    a.iter()
        .zip(b)
        .zip(c)
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect()
}
