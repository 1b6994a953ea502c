//! The tape: a flat, append-only list of nodes in creation order.
//!
//! Every operation appends one node whose parents already exist, so creation
//! order is a topological order and `backward` is a single reverse sweep.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::tensor::{gemm_into, Tensor};

/// Epsilon clamp applied to probabilities before taking their log.
pub const LOG_EPS: f64 = 1e-12;
/// Variance epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows that attend only to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        sources: Vec<Var>,
        picks: Vec<(usize, usize)>,
    },
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Tensor,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

struct ParamEntry {
    name: String,
    var: Var,
    shape: Vec<usize>,
}

/// Single-threaded tape. Build one per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<ParamEntry>,
}

/// Gradients of a scalar loss: by parameter name and by node.
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
    by_var: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a named parameter in its registered shape.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    /// Gradient of any node (matrix view). Zeros-shaped `None` means the node
    /// did not influence the loss or does not require gradients.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_name.keys().map(String::as_str)
    }
}

fn matrix_shape(t: &Tensor) -> Vec<usize> {
    vec![t.rows(), t.cols()]
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
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    /// Trainable leaf. Leading dimensions are folded into rows, so a
    /// `[n, l, d]` table becomes an `[n * l, d]` matrix on the tape.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        let shape = value.shape().to_vec();
        let cols = shape.last().copied().unwrap_or(1);
        let rows = value.len().checked_div(cols).unwrap_or(0);
        let m = Tensor::new(vec![rows, cols], value.data().to_vec()).expect("consistent shape");
        let var = self.push(m, Op::Leaf, true);
        self.params.push(ParamEntry { name: name.to_string(), var, shape });
        var
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let m = value.as_matrix();
        self.push(m, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = Tensor::matmul_t(self.value(a), false, self.value(b), false)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                left: self.shape_of(a),
                right: self.shape_of(b),
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

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.shape_of(a), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a[i, :] + bias[0, :]` for every row `i`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row_bias",
                left: self.shape_of(a),
                right: self.shape_of(bias),
            });
        }
        let mut out = av.clone();
        let b = bv.data().to_vec();
        for r in 0..out.rows() {
            for (x, y) in out.row_mut(r).iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddRowBias(a, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x.max(0.0)).collect();
        let out = Tensor::new(self.shape_of(a), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let out = Tensor::new(self.shape_of(a), data).expect("same shape");
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization followed by `gain * x̂ + bias`, with
    /// `gain` and `bias` of shape `[1, cols]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        for p in [gain, bias] {
            let pv = self.value(p);
            if pv.rows() != 1 || pv.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "layer_norm",
                    left: self.shape_of(x),
                    right: self.shape_of(p),
                });
            }
        }
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            let orow = out.row_mut(r);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                orow[c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Output row `i` is row `picks[i].1` of `sources[picks[i].0]`.
    ///
    /// This is the general form of embedding lookup: it lets one sequence
    /// mix rows from several tables (token, user and prefix embeddings).
    pub fn gather(&mut self, sources: &[Var], picks: &[(usize, usize)]) -> Result<Var> {
        let cols = match sources.first() {
            Some(&s) => self.value(s).cols(),
            None => return Err(AutodiffError::Invalid("gather needs at least one source".into())),
        };
        for &s in &sources[1..] {
            if self.value(s).cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "gather",
                    left: self.shape_of(sources[0]),
                    right: self.shape_of(s),
                });
            }
        }
        let mut out = Tensor::zeros(&[picks.len(), cols]);
        for (i, &(src, row)) in picks.iter().enumerate() {
            let s = *sources.get(src).ok_or(AutodiffError::IndexOutOfRange {
                op: "gather",
                index: src,
                len: sources.len(),
            })?;
            let sv = self.value(s);
            if row >= sv.rows() {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather",
                    index: row,
                    len: sv.rows(),
                });
            }
            let src_row = sv.row(row).to_vec();
            out.row_mut(i).copy_from_slice(&src_row);
        }
        let rg = sources.iter().any(|&s| self.rg(s));
        Ok(self.push(
            out,
            Op::Gather { sources: sources.to_vec(), picks: picks.to_vec() },
            rg,
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let picks: Vec<_> = ids.iter().map(|&i| (0, i)).collect();
        self.gather(&[table], &picks)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.embedding_lookup(a, rows)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AutodiffError::Invalid("concat_rows needs at least one part".into()))?;
        let cols = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape_of(first),
                    right: self.shape_of(p),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Column means: `[rows, cols]` → `[1, cols]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let (rows, cols) = (v.rows(), v.cols());
        if rows == 0 {
            return Err(AutodiffError::Invalid("mean_rows of an empty matrix".into()));
        }
        let mut out = Tensor::zeros(&[1, cols]);
        for r in 0..rows {
            for (o, x) in out.data_mut().iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        out.scale_assign(1.0 / rows as f64);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    /// Mean over rows of `-ln softmax(logits)[target]`, with the probability
    /// clamped at [`LOG_EPS`].
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || targets.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape_of(logits),
                right: vec![targets.len()],
            });
        }
        let classes = lv.cols();
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    len: classes,
                });
            }
            let row = probs.row_mut(r);
            softmax_in_place(row);
            total -= row[t].max(LOG_EPS).ln();
        }
        let out = Tensor::scalar(total / targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// Multi-head scaled dot-product self-attention restricted to row
    /// segments: rows of one segment attend only to rows of the same segment.
    /// `q`, `k` and `v` are `[rows, d]` with `d` divisible by `heads`; rows
    /// outside every segment produce zeros.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("segment_attention", q, k)?;
        self.same_shape("segment_attention", q, v)?;
        let (rows, d) = (self.value(q).rows(), self.value(q).cols());
        if heads == 0 || d % heads != 0 {
            return Err(AutodiffError::Invalid(format!(
                "width {d} not divisible into {heads} heads"
            )));
        }
        for s in segments {
            if s.start + s.len > rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "segment_attention",
                    index: s.start + s.len,
                    len: rows,
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let total: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = Tensor::zeros(&[rows, d]);
        let od = out.data_mut();
        let mut off = 0;
        for s in segments {
            let n = s.len;
            for h in 0..heads {
                let c0 = h * dh;
                let p = &mut probs[off..off + n * n];
                for i in 0..n {
                    let qi = &qd[(s.start + i) * d + c0..(s.start + i) * d + c0 + dh];
                    let prow = &mut p[i * n..(i + 1) * n];
                    for (j, pj) in prow.iter_mut().enumerate() {
                        let kj = &kd[(s.start + j) * d + c0..(s.start + j) * d + c0 + dh];
                        *pj = dot(qi, kj) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut od[(s.start + i) * d + c0..(s.start + i) * d + c0 + dh];
                    for (j, &pj) in prow.iter().enumerate() {
                        let vj = &vd[(s.start + j) * d + c0..(s.start + j) * d + c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
                off += n * n;
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention { q, k, v, segments: segments.to_vec(), heads, probs },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every registered parameter gets an
    /// entry; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for p in &self.params {
            let t = match &grads[p.var.0] {
                Some(g) => Tensor::new(p.shape.clone(), g.data().to_vec())?,
                None => Tensor::zeros(&p.shape),
            };
            by_name.insert(p.name.clone(), t);
        }
        Ok(Gradients { by_name, by_var: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Adds `a' b'` into the gradient slot of `v` without an extra temporary
    /// when the slot already exists.
    fn accumulate_gemm(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        a: &Tensor,
        ta: bool,
        b: &Tensor,
        tb: bool,
    ) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => gemm_into(a, ta, b, tb, acc, 1.0),
            slot @ None => {
                *slot = Some(Tensor::matmul_t(a, ta, b, tb).expect("shapes checked in forward"))
            }
        }
    }

    fn zeros_like(&self, v: Var) -> Tensor {
        Tensor::zeros(&matrix_shape(self.value(v)))
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate_gemm(grads, *a, g, false, bv, true);
                self.accumulate_gemm(grads, *b, av, true, g, false);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga: Vec<f64> = g.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb: Vec<f64> = g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                let shape = g.shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(shape.clone(), ga).expect("shape"));
                self.accumulate(grads, *b, Tensor::new(shape, gb).expect("shape"));
            }
            Op::AddRowBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*bias) {
                    let mut gb = self.zeros_like(*bias);
                    for r in 0..g.rows() {
                        for (o, x) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Scale(a, s) => {
                let mut ga = g.clone();
                ga.scale_assign(*s);
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let data = g
                    .data()
                    .iter()
                    .zip(av.data())
                    .map(|(gi, &x)| {
                        let u = GELU_C * (x + GELU_A * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), data).expect("shape"));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(&matrix_shape(y));
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dotp = dot(yr, gr);
                    for (o, (yi, gi)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yi * (gi - dotp);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (rows, cols) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; cols];
                    let mut db = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        for c in 0..cols {
                            dg[c] += gr[c] * xhat[r * cols + c];
                            db[c] += gr[c];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::new(vec![1, cols], dg).expect("shape"));
                    self.accumulate(grads, *bias, Tensor::new(vec![1, cols], db).expect("shape"));
                }
                if self.rg(*x) {
                    let mut dx = Tensor::zeros(&[rows, cols]);
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..cols {
                            dxhat[c] = gr[c] * gv[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xh[c];
                        }
                        let is = inv_std[r];
                        for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                            *o = is / n * (n * dxhat[c] - s1 - xh[c] * s2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gather { sources, picks } => {
                let mut local: Vec<Option<Tensor>> = sources
                    .iter()
                    .map(|&s| self.rg(s).then(|| self.zeros_like(s)))
                    .collect();
                for (i, &(src, row)) in picks.iter().enumerate() {
                    if let Some(t) = &mut local[src] {
                        for (o, x) in t.row_mut(row).iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                }
                // A source listed twice gets both contributions.
                for (&s, t) in sources.iter().zip(local) {
                    if let Some(t) = t {
                        self.accumulate(grads, s, t);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut r0 = 0;
                for &p in parts {
                    let n = self.value(p).rows();
                    if self.rg(p) {
                        let cols = g.cols();
                        let data = g.data()[r0 * cols..(r0 + n) * cols].to_vec();
                        self.accumulate(grads, p, Tensor::new(vec![n, cols], data).expect("shape"));
                    }
                    r0 += n;
                }
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let rows = av.rows();
                let mut ga = self.zeros_like(*a);
                let inv = 1.0 / rows as f64;
                for r in 0..rows {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.data()) {
                        *o = x * inv;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                let ga = Tensor::full(&matrix_shape(self.value(*a)), s);
                self.accumulate(grads, *a, ga);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.data()[0] / targets.len() as f64;
                let mut ga = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = ga.row_mut(r);
                    row[t] -= 1.0;
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                }
                self.accumulate(grads, *logits, ga);
            }
            Op::Attention { q, k, v, segments, heads, probs } => {
                self.attention_backward(g, *q, *k, *v, segments, *heads, probs, grads);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd, gd) = (qv.data(), kv.data(), vv.data(), g.data());
        let mut dq = self.zeros_like(q);
        let mut dk = self.zeros_like(k);
        let mut dv = self.zeros_like(v);
        let mut off = 0;
        let mut ds = Vec::new();
        for s in segments {
            let n = s.len;
            ds.resize(n * n, 0.0);
            for h in 0..heads {
                let c0 = h * dh;
                let p = &probs[off..off + n * n];
                let at = |row: usize| (s.start + row) * d + c0..(s.start + row) * d + c0 + dh;
                for i in 0..n {
                    let gi = &gd[at(i)];
                    let prow = &p[i * n..(i + 1) * n];
                    let mut rowdot = 0.0;
                    for j in 0..n {
                        let vj = &vd[at(j)];
                        let dp = dot(gi, vj);
                        ds[i * n + j] = dp;
                        rowdot += prow[j] * dp;
                        let dvj = &mut dv.data_mut()[at(j)];
                        for (o, x) in dvj.iter_mut().zip(gi) {
                            *o += prow[j] * x;
                        }
                    }
                    for j in 0..n {
                        ds[i * n + j] = prow[j] * (ds[i * n + j] - rowdot) * scale;
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        let w = ds[i * n + j];
                        if w == 0.0 {
                            continue;
                        }
                        {
                            let kj = &kd[at(j)];
                            let dqi = &mut dq.data_mut()[at(i)];
                            for (o, x) in dqi.iter_mut().zip(kj) {
                                *o += w * x;
                            }
                        }
                        let qi = &qd[at(i)];
                        let dkj = &mut dk.data_mut()[at(j)];
                        for (o, x) in dkj.iter_mut().zip(qi) {
                            *o += w * x;
                        }
                    }
                }
                off += n * n;
            }
        }
        self.accumulate(grads, q, dq);
        self.accumulate(grads, k, dk);
        self.accumulate(grads, v, dv);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v]).unwrap()
    }

    #[test]
    fn ce_of_uniform_two_way_is_ln2() {
        let mut g = Graph::new();
        let l = g.constant(row(&[0.0, 0.0]));
        let ce = g.cross_entropy(l, &[0]).unwrap();
        assert!((g.value(ce).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let l = g.constant(row(&[0.0, 0.0, 0.0]));
        let s = g.softmax_rows(l);
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn unreached_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(2.0));
        let _p = g.param("p", &Tensor::full(&[2, 3], 1.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        let gp = grads.get("p").unwrap();
        assert_eq!(gp.shape(), &[2, 3]);
        assert!(gp.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn tied_lookup_sums_positional_contributions() {
        // Row 1 of the table is read at two positions; its gradient is the
        // sum of both upstream rows.
        let mut g = Graph::new();
        let table = g.param("emb", &Tensor::zeros(&[3, 2]));
        let e = g.embedding_lookup(table, &[1, 0, 1]).unwrap();
        let w = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap());
        let prod = g.mul(e, w).unwrap();
        let loss = g.sum(prod);
        let grads = g.backward(loss).unwrap();
        let ge = grads.get("emb").unwrap();
        assert_eq!(ge.row(1), &[6.0, 8.0]);
        assert_eq!(ge.row(0), &[3.0, 4.0]);
        assert_eq!(ge.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        // y = relu(x) + 3x ; dy/dx = 1 + 3 at x > 0 regardless of visit order.
        let mut g = Graph::new();
        let x = g.param("x", &Tensor::scalar(0.5));
        let a = g.relu(x);
        let b = g.scale(x, 3.0);
        let y = g.add(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[4.0]);
        let mut g2 = Graph::new();
        let x = g2.param("x", &Tensor::scalar(0.5));
        let b = g2.scale(x, 3.0);
        let a = g2.relu(x);
        let y = g2.add(b, a).unwrap();
        assert_eq!(g2.backward(y).unwrap().get("x").unwrap().data(), &[4.0]);
    }

    #[test]
    fn cross_entropy_clamps_log() {
        let mut g = Graph::new();
        let l = g.constant(row(&[0.0, 2000.0]));
        let ce = g.cross_entropy(l, &[0]).unwrap();
        let v = g.value(ce).data()[0];
        assert!(v.is_finite());
        assert!((v - (-LOG_EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn attention_rows_outside_segments_are_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 2], 1.0));
        let out = g
            .segment_attention(x, x, x, &[Segment { start: 0, len: 2 }], 1)
            .unwrap();
        assert_eq!(g.value(out).row(2), &[0.0, 0.0]);
        assert!((g.value(out).row(0)[0] - 1.0).abs() < 1e-15);
    }
}
