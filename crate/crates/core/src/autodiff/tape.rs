//! Reverse-mode differentiation over a Wengert list.
//!
//! Every operation appends a node holding its forward value and the handles
//! of its inputs, so node indices are already a topological order. `backward`
//! walks the list once in reverse, and only nodes that (transitively) depend
//! on a trainable leaf receive gradient.

use crate::autodiff::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Gelu(Var),
    CosineSimilarity(Var, Var),
    L2NormalizeRows(Var, Vec<f64>),
    FrobeniusSq(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        heads: usize,
        probs: Vec<Matrix>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    grad: Option<Matrix>,
}

/// A differentiation graph. Build it forward, call [`Tape::backward`] on a
/// scalar node, then read leaf gradients with [`Tape::grad`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
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

    /// Multiply-accumulate count of every `matmul` recorded so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf; never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dims(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let (m, k) = self.shape(a);
        self.macs += (m * k * self.shape(b).1) as u64;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x -= y;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Adds a `1 x n` row to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(row) != (1, n) {
            return Err(Error::dims(
                "add_row",
                format!("{:?} + {:?}", (m, n), self.shape(row)),
            ));
        }
        let mut value = self.value(x).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r) {
                *v += b;
            }
        }
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::AddScalar(x), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let value = self.value(x).transpose();
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Transpose(x), rg)
    }

    /// Row-wise softmax, stabilized by subtracting each row's max.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.any_grad(&[x]);
        self.push(value, Op::SoftmaxRows(x), rg)
    }

    /// Per-row `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if n < 2 {
            return Err(Error::dims("layer_norm_rows", format!("need >= 2 columns, got {n}")));
        }
        if self.shape(gain) != (1, n) || self.shape(bias) != (1, n) {
            return Err(Error::dims(
                "layer_norm_rows",
                format!(
                    "x {:?}, gain {:?}, bias {:?}",
                    (m, n),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Matrix::zeros(m, n);
        let mut out = Matrix::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for c in 0..n {
                xh[c] = (row[c] - mean) * is;
            }
            let o = out.row_mut(r);
            for c in 0..n {
                o[c] = xh[c] * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Column means as a `1 x n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if m == 0 {
            return Err(Error::EmptyInput("mean_rows"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Matrix::from_raw(1, n, out), Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Matrix::scalar(s), Op::SumAll(x), rg)
    }

    /// Stacks parts vertically in argument order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_rows"));
        }
        let value = Matrix::stack_rows(parts.iter().map(|p| &self.nodes[p.0].value))
            .map_err(|_| {
                let shapes: Vec<_> = parts.iter().map(|p| self.shape(*p)).collect();
                Error::dims("concat_rows", format!("{shapes:?}"))
            })?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Joins parts horizontally in argument order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::EmptyInput("concat_cols"));
        };
        let m = self.shape(*first).0;
        if parts.iter().any(|p| self.shape(*p).0 != m) {
            let shapes: Vec<_> = parts.iter().map(|p| self.shape(*p)).collect();
            return Err(Error::dims("concat_cols", format!("{shapes:?}")));
        }
        let n: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Matrix::zeros(m, n);
        for r in 0..m {
            let mut off = 0;
            for p in parts {
                let src = self.nodes[p.0].value.row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, _) = self.shape(x);
        if start + len > m || len == 0 {
            return Err(Error::dims(
                "slice_rows",
                format!("rows {start}..{} of {m}", start + len),
            ));
        }
        let value = self.value(x).slice_rows(start, len);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.shape(x);
        if start + len > n || len == 0 {
            return Err(Error::dims(
                "slice_cols",
                format!("cols {start}..{} of {n}", start + len),
            ));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(m, len);
        for r in 0..m {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols(x, start), rg))
    }

    /// Output row `i` is row `index[i]` of `x`. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(x);
        if index.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::dims("gather_rows", format!("row {bad} of {m}")));
        }
        let xv = self.value(x);
        let mut out = Matrix::zeros(index.len(), n);
        for (r, &i) in index.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::GatherRows(x, index.to_vec()), rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// `u.v / (|u| |v|)` for two `1 x n` rows.
    pub fn cosine_similarity(&mut self, u: Var, v: Var) -> Result<Var> {
        let (ur, un) = self.shape(u);
        if ur != 1 || self.shape(v) != (1, un) {
            return Err(Error::dims(
                "cosine_similarity",
                format!("{:?} vs {:?}", self.shape(u), self.shape(v)),
            ));
        }
        let a = self.value(u).data();
        let b = self.value(v).data();
        let na = norm(a);
        let nb = norm(b);
        if na == 0.0 || nb == 0.0 {
            return Err(Error::ZeroVector("cosine_similarity operand".into()));
        }
        let s = dot(a, b) / (na * nb);
        let rg = self.any_grad(&[u, v]);
        Ok(self.push(Matrix::scalar(s), Op::CosineSimilarity(u, v), rg))
    }

    /// Scales every row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let nr = norm(row);
            if nr == 0.0 {
                return Err(Error::ZeroVector(format!("row {r}")));
            }
            row.iter_mut().for_each(|v| *v /= nr);
            norms.push(nr);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::L2NormalizeRows(x, norms), rg))
    }

    /// Squared Frobenius norm as a `1 x 1` node.
    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.any_grad(&[x]);
        self.push(Matrix::scalar(s), Op::FrobeniusSq(x), rg)
    }

    /// Mean over rows of `-log softmax(logits_i)[targets_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.shape(logits);
        if m == 0 {
            return Err(Error::BatchEmpty);
        }
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(Error::dims(
                "softmax_cross_entropy",
                format!("{m}x{n} logits with {} targets", targets.len()),
            ));
        }
        let mut probs = self.value(logits).clone();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Matrix::scalar(loss / m as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention applied independently to each
    /// row block `(start, len)` of the packed `q`, `k`, `v` (all `m x n`).
    /// Heads split the columns evenly. Rows outside every segment are zero.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
    ) -> Result<Var> {
        let (m, n) = self.shape(q);
        self.same_shape("segment_attention", q, k)?;
        self.same_shape("segment_attention", q, v)?;
        if heads == 0 || n % heads != 0 {
            return Err(Error::dims("segment_attention", format!("{n} columns, {heads} heads")));
        }
        if let Some(s) = segments.iter().find(|(s, l)| *l == 0 || s + l > m) {
            return Err(Error::dims("segment_attention", format!("segment {s:?} of {m} rows")));
        }
        let dh = n / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = Matrix::zeros(m, n);
        let mut probs = Vec::with_capacity(segments.len() * heads);
        let mut macs = 0u64;
        for &(start, len) in segments {
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Matrix::zeros(len, len);
                for i in 0..len {
                    let qi = &qv.row(start + i)[c0..c0 + dh];
                    let row = p.row_mut(i);
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = dot(qi, &kv.row(start + j)[c0..c0 + dh]) * scale;
                    }
                    softmax_in_place(row);
                }
                for i in 0..len {
                    let pi = p.row(i).to_vec();
                    let o = &mut out.row_mut(start + i)[c0..c0 + dh];
                    for (j, w) in pi.iter().enumerate() {
                        for (x, y) in o.iter_mut().zip(&vv.row(start + j)[c0..c0 + dh]) {
                            *x += w * y;
                        }
                    }
                }
                macs += (2 * len * len * dh) as u64;
                probs.push(p);
            }
        }
        self.macs += macs;
        let rg = self.any_grad(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        ))
    }

    // ---- reverse pass ----

    /// Accumulates `d loss / d leaf` into every trainable leaf reachable from
    /// `loss`. Calling it twice without [`Tape::zero_grads`] adds the
    /// gradients twice.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let (rows, cols) = self.shape(loss);
        if (rows, cols) != (1, 1) {
            return Err(Error::NotScalar { rows, cols });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.add_assign(&g),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if wants(a) {
                    let slot = slot(grads, *a, av.shape());
                    let (dst, beta) = slot;
                    gemm(false, g, true, bv, dst, beta);
                }
                if wants(b) {
                    let (dst, beta) = slot(grads, *b, bv.shape());
                    gemm(true, av, false, g, dst, beta);
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(b) {
                    accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::AddRow(x, row) => {
                if wants(x) {
                    accumulate(grads, *x, g.clone());
                }
                if wants(row) {
                    accumulate(grads, *row, column_sums(g));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    accumulate(grads, *a, hadamard(g, self.value(*b)));
                }
                if wants(b) {
                    accumulate(grads, *b, hadamard(g, self.value(*a)));
                }
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.map(|v| v * s)),
            Op::AddScalar(x) => accumulate(grads, *x, g.clone()),
            Op::Transpose(x) => accumulate(grads, *x, g.transpose()),
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let inner = dot(g.row(r), yr);
                    for (d, (gv, yv)) in dx.row_mut(r).iter_mut().zip(g.row(r).iter().zip(yr)) {
                        *d = yv * (gv - inner);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = xhat.shape();
                if wants(gain) {
                    accumulate(grads, *gain, column_sums(&hadamard(g, xhat)));
                }
                if wants(bias) {
                    accumulate(grads, *bias, column_sums(g));
                }
                if wants(x) {
                    let gv = self.value(*gain).data();
                    let mut dx = Matrix::zeros(m, n);
                    let nf = n as f64;
                    for r in 0..m {
                        let gr = g.row(r);
                        let xh = xhat.row(r);
                        let dxhat: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / nf;
                        for (c, d) in dx.row_mut(r).iter_mut().enumerate() {
                            *d = k * (nf * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::MeanRows(x) => {
                let (m, n) = self.shape(*x);
                let mut dx = Matrix::zeros(m, n);
                let scaled: Vec<f64> = g.data().iter().map(|v| v / m as f64).collect();
                for r in 0..m {
                    dx.row_mut(r).copy_from_slice(&scaled);
                }
                accumulate(grads, *x, dx);
            }
            Op::SumAll(x) => {
                let (m, n) = self.shape(*x);
                accumulate(grads, *x, Matrix::filled(m, n, g.item()));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.shape(*p).0;
                    if wants(p) {
                        accumulate(grads, *p, g.slice_rows(off, len));
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let (m, len) = self.shape(*p);
                    if wants(p) {
                        let mut part = Matrix::zeros(m, len);
                        for r in 0..m {
                            part.row_mut(r).copy_from_slice(&g.row(r)[off..off + len]);
                        }
                        accumulate(grads, *p, part);
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let (m, n) = self.shape(*x);
                let mut dx = Matrix::zeros(m, n);
                for r in 0..g.rows() {
                    dx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceCols(x, start) => {
                let (m, n) = self.shape(*x);
                let mut dx = Matrix::zeros(m, n);
                for r in 0..m {
                    dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, dx);
            }
            Op::GatherRows(x, index) => {
                let (m, n) = self.shape(*x);
                let mut dx = Matrix::zeros(m, n);
                for (r, &src) in index.iter().enumerate() {
                    for (d, v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    *d *= gelu_grad(v);
                }
                accumulate(grads, *x, dx);
            }
            Op::CosineSimilarity(u, v) => {
                let a = self.value(*u).data();
                let b = self.value(*v).data();
                let (na, nb) = (norm(a), norm(b));
                let s = node.value.item();
                let gs = g.item();
                if wants(u) {
                    let d: Vec<f64> = a
                        .iter()
                        .zip(b)
                        .map(|(x, y)| gs * (y / (na * nb) - s * x / (na * na)))
                        .collect();
                    accumulate(grads, *u, Matrix::from_raw(1, d.len(), d));
                }
                if wants(v) {
                    let d: Vec<f64> = a
                        .iter()
                        .zip(b)
                        .map(|(x, y)| gs * (x / (na * nb) - s * y / (nb * nb)))
                        .collect();
                    accumulate(grads, *v, Matrix::from_raw(1, d.len(), d));
                }
            }
            Op::L2NormalizeRows(x, norms) => {
                let y = &node.value;
                let mut dx = g.clone();
                for (r, nr) in norms.iter().enumerate() {
                    let inner = dot(g.row(r), y.row(r));
                    for (d, (gv, yv)) in dx.row_mut(r).iter_mut().zip(g.row(r).iter().zip(y.row(r))) {
                        *d = (gv - yv * inner) / nr;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::FrobeniusSq(x) => {
                let k = 2.0 * g.item();
                accumulate(grads, *x, self.value(*x).map(|v| v * k));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = targets.len() as f64;
                let k = g.item() / m;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    d.row_mut(r)[t] -= 1.0;
                }
                d.scale_in_place(k);
                accumulate(grads, *logits, d);
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (m, n) = qv.shape();
                let dh = n / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(m, n);
                let mut dk = Matrix::zeros(m, n);
                let mut dv = Matrix::zeros(m, n);
                let mut p_iter = probs.iter();
                for &(start, len) in segments {
                    for h in 0..*heads {
                        let p = p_iter.next().expect("one prob block per segment and head");
                        let c0 = h * dh;
                        let cols = c0..c0 + dh;
                        for i in 0..len {
                            let gi = &g.row(start + i)[cols.clone()];
                            // dS_ij = P_ij (dP_ij - sum_k P_ik dP_ik), dP_ij = g_i . v_j
                            let dp: Vec<f64> = (0..len).map(|j| dot(gi, &vv.row(start + j)[cols.clone()])).collect();
                            let pi = p.row(i);
                            let inner = dot(pi, &dp);
                            for j in 0..len {
                                let pij = pi[j];
                                for (x, y) in dv.row_mut(start + j)[cols.clone()].iter_mut().zip(gi) {
                                    *x += pij * y;
                                }
                                let ds = pij * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(start + j)[cols.clone()];
                                for (x, y) in dq.row_mut(start + i)[cols.clone()].iter_mut().zip(kj) {
                                    *x += ds * y;
                                }
                                let qi = &qv.row(start + i)[cols.clone()];
                                for (x, y) in dk.row_mut(start + j)[cols.clone()].iter_mut().zip(qi) {
                                    *x += ds * y;
                                }
                            }
                        }
                    }
                }
                if wants(q) {
                    accumulate(grads, *q, dq);
                }
                if wants(k) {
                    accumulate(grads, *k, dk);
                }
                if wants(v) {
                    accumulate(grads, *v, dv);
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> (&'a mut Matrix, f64) {
    let entry = &mut grads[v.0];
    match entry {
        Some(_) => (entry.as_mut().expect("present"), 1.0),
        None => {
            *entry = Some(Matrix::zeros(shape.0, shape.1));
            (entry.as_mut().expect("present"), 0.0)
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Matrix::from_raw(1, g.cols(), out)
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Matrix::from_raw(a.rows(), a.cols(), data)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
