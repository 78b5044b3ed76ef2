//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients for every
//! node that transitively depends on a leaf created with `requires_grad = true`.
//! Tapes are cheap and single-use: build one per sample, read the gradients, drop it.

use std::sync::Arc;

use crate::tensor::{dot, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MulRows(Var, Var),
    MulConst(Var, Arc<Tensor>),
    Relu(Var),
    RowSoftmax(Var),
    RowNormalize(Var, Vec<f64>),
    FrameMix(Var, Arc<Tensor>),
    TimeShift { x: Var, shift: isize, frame_rows: usize },
    GatherRows(Var, Arc<Vec<usize>>),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SumAll(Var),
    MeanRows(Var),
    BlockScores { q: Var, k: Var, nq: usize, nk: usize },
    BlockApply { a: Var, v: Var, nq: usize, nk: usize },
    CrossEntropy { logits: Var, label: usize, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph of a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Leaf node. Parameters pass `requires_grad = true`; inputs and constants `false`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulNt(a, b), ng)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p + q);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p - q);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |p, q| p * q);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// `x (n x c) + row (1 x c)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a 1-row operand");
        assert_eq!(xv.cols(), rv.cols(), "add_row column mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let ng = self.ng(x) || self.ng(row);
        self.push(value, Op::AddRow(x, row), ng)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        let ng = self.ng(x);
        self.push(value, Op::AddConst(x), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    /// `x * s` where `s` is a `1 x 1` node.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "scale_by expects a scalar node");
        let s_val = sv.data()[0];
        let value = self.value(x).map(|v| v * s_val);
        let ng = self.ng(x) || self.ng(s);
        self.push(value, Op::ScaleBy(x, s), ng)
    }

    /// Row `i` of `x` multiplied by `w[i]`, with `w` of shape `n x 1`.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(wv.shape(), (xv.rows(), 1), "mul_rows weight shape mismatch");
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let s = wv.data()[r];
            for o in value.row_mut(r) {
                *o *= s;
            }
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(value, Op::MulRows(x, w), ng)
    }

    /// Elementwise product with a constant mask.
    pub fn mul_const(&mut self, x: Var, mask: Arc<Tensor>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), mask.shape(), "mul_const shape mismatch");
        let data = xv.data().iter().zip(mask.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_vec(xv.rows(), xv.cols(), data);
        let ng = self.ng(x);
        self.push(value, Op::MulConst(x, mask), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn row_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        let ng = self.ng(x);
        self.push(value, Op::RowSoftmax(x), ng)
    }

    /// Each row divided by its Euclidean norm. Callers must reject zero rows first.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let n = dot(row, row).sqrt();
            for v in row.iter_mut() {
                *v /= n;
            }
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(value, Op::RowNormalize(x, norms), ng)
    }

    /// Mixes rows within consecutive blocks of `adj.rows()` rows:
    /// `y[b*n + i] = Σ_j adj[i][j] · x[b*n + j]`. With frame-major layout this applies
    /// a joint adjacency independently to every frame.
    pub fn frame_mix(&mut self, x: Var, adj: Arc<Tensor>) -> Var {
        let xv = self.value(x);
        let n = adj.rows();
        assert_eq!(adj.cols(), n, "adjacency must be square");
        assert_eq!(xv.rows() % n, 0, "frame_mix row count not a multiple of block size");
        let c = xv.cols();
        let mut out = vec![0.0; xv.len()];
        for b in 0..xv.rows() / n {
            for i in 0..n {
                let dst = &mut out[(b * n + i) * c..(b * n + i + 1) * c];
                for j in 0..n {
                    let a = adj.at(i, j);
                    if a == 0.0 {
                        continue;
                    }
                    for (o, v) in dst.iter_mut().zip(xv.row(b * n + j)) {
                        *o += a * v;
                    }
                }
            }
        }
        let value = Tensor::from_vec(xv.rows(), c, out);
        let ng = self.ng(x);
        self.push(value, Op::FrameMix(x, adj), ng)
    }

    /// Temporal shift with zero padding: frame `t` of the output is frame `t + shift`
    /// of the input. A frame is `frame_rows` consecutive rows.
    pub fn time_shift(&mut self, x: Var, shift: isize, frame_rows: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.rows() % frame_rows, 0, "time_shift row count mismatch");
        let frames = (xv.rows() / frame_rows) as isize;
        let width = frame_rows * xv.cols();
        let mut value = Tensor::zeros(xv.rows(), xv.cols());
        for t in 0..frames {
            let src = t + shift;
            if (0..frames).contains(&src) {
                let (s, d) = (src as usize * width, t as usize * width);
                value.data_mut()[d..d + width].copy_from_slice(&xv.data()[s..s + width]);
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::TimeShift { x, shift, frame_rows }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Var {
        let xv = self.value(x);
        let mut value = Tensor::zeros(index.len(), xv.cols());
        for (r, &i) in index.iter().enumerate() {
            value.row_mut(r).copy_from_slice(xv.row(i));
        }
        let ng = self.ng(x);
        self.push(value, Op::GatherRows(x, index), ng)
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let value = self.value(x).clone().reshaped(rows, cols);
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mut value = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            value.append_rows(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows(), bv.rows(), "concat_cols row mismatch");
        let cols = av.cols() + bv.cols();
        let mut data = Vec::with_capacity(av.rows() * cols);
        for r in 0..av.rows() {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let value = Tensor::from_vec(av.rows(), cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::ConcatCols(a, b), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::from_vec(1, 1, vec![self.value(x).sum()]);
        let ng = self.ng(x);
        self.push(value, Op::SumAll(x), ng)
    }

    /// Mean over rows, giving `1 x cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self.value(x).mean_row();
        let ng = self.ng(x);
        self.push(value, Op::MeanRows(x), ng)
    }

    /// Per-block scores `Q_b · K_bᵀ`. `q` holds blocks of `nq` rows and `k` blocks of
    /// `nk` rows; the output has `B * nq` rows and `nk` columns.
    pub fn block_scores(&mut self, q: Var, k: Var, nq: usize, nk: usize) -> Var {
        let (qv, kv) = (self.value(q), self.value(k));
        assert_eq!(qv.cols(), kv.cols(), "block_scores feature mismatch");
        let blocks = qv.rows() / nq;
        assert_eq!(blocks * nq, qv.rows());
        assert_eq!(blocks * nk, kv.rows(), "block_scores block count mismatch");
        let mut value = Tensor::zeros(blocks * nq, nk);
        for b in 0..blocks {
            for i in 0..nq {
                for j in 0..nk {
                    let s = dot(qv.row(b * nq + i), kv.row(b * nk + j));
                    value.set(b * nq + i, j, s);
                }
            }
        }
        let ng = self.ng(q) || self.ng(k);
        self.push(value, Op::BlockScores { q, k, nq, nk }, ng)
    }

    /// Per-block `A_b · V_b` for `a` of shape `(B * nq) x nk` and `v` of `(B * nk) x d`.
    pub fn block_apply(&mut self, a: Var, v: Var, nq: usize, nk: usize) -> Var {
        let (av, vv) = (self.value(a), self.value(v));
        assert_eq!(av.cols(), nk, "block_apply attention width mismatch");
        let blocks = av.rows() / nq;
        assert_eq!(blocks * nk, vv.rows(), "block_apply block count mismatch");
        let d = vv.cols();
        let mut value = Tensor::zeros(blocks * nq, d);
        for b in 0..blocks {
            for i in 0..nq {
                let out = &mut value.data_mut()[(b * nq + i) * d..(b * nq + i + 1) * d];
                for j in 0..nk {
                    let w = av.at(b * nq + i, j);
                    for (o, x) in out.iter_mut().zip(vv.row(b * nk + j)) {
                        *o += w * x;
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(v);
        self.push(value, Op::BlockApply { a, v, nq, nk }, ng)
    }

    /// Softmax cross-entropy of a `1 x K` logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), 1, "cross_entropy expects a single logit row");
        assert!(label < lv.cols(), "label {label} out of range for {} logits", lv.cols());
        let mut probs = lv.data().to_vec();
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let loss = lse - lv.data()[label];
        softmax_in_place(&mut probs);
        let ng = self.ng(logits);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul_nt(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, self.value(*a).matmul_tn(g));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if self.ng(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.ng(*b) {
                    self.accumulate(grads, *b, g.matmul_tn(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let t = hadamard(g, self.value(*b));
                    self.accumulate(grads, *a, t);
                }
                if self.ng(*b) {
                    let t = hadamard(g, self.value(*a));
                    self.accumulate(grads, *b, t);
                }
            }
            Op::AddRow(x, row) => {
                self.accumulate(grads, *x, g.clone());
                if self.ng(*row) {
                    let mut s = g.mean_row();
                    s.scale_in_place(g.rows() as f64);
                    self.accumulate(grads, *row, s);
                }
            }
            Op::AddConst(x) => self.accumulate(grads, *x, g.clone()),
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::ScaleBy(x, s) => {
                let s_val = self.value(*s).data()[0];
                if self.ng(*x) {
                    self.accumulate(grads, *x, g.map(|v| v * s_val));
                }
                if self.ng(*s) {
                    let d = dot(g.data(), self.value(*x).data());
                    self.accumulate(grads, *s, Tensor::from_vec(1, 1, vec![d]));
                }
            }
            Op::MulRows(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                if self.ng(*x) {
                    let mut t = g.clone();
                    for r in 0..t.rows() {
                        let s = wv.data()[r];
                        for v in t.row_mut(r) {
                            *v *= s;
                        }
                    }
                    self.accumulate(grads, *x, t);
                }
                if self.ng(*w) {
                    let d = (0..xv.rows()).map(|r| dot(g.row(r), xv.row(r))).collect();
                    self.accumulate(grads, *w, Tensor::from_vec(xv.rows(), 1, d));
                }
            }
            Op::MulConst(x, mask) => {
                let t = hadamard(g, mask);
                self.accumulate(grads, *x, t);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.rows(), g.cols(), data));
            }
            Op::RowSoftmax(x) => {
                let y = &node.value;
                let mut t = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((o, &yv), &gv) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::RowNormalize(x, norms) => {
                let y = &node.value;
                let mut t = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((o, &yv), &gv) in t.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * s) / norms[r];
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::FrameMix(x, adj) => {
                let n = adj.rows();
                let c = g.cols();
                let mut t = Tensor::zeros(g.rows(), c);
                for b in 0..g.rows() / n {
                    for i in 0..n {
                        for j in 0..n {
                            let a = adj.at(i, j);
                            if a == 0.0 {
                                continue;
                            }
                            for (o, v) in t.row_mut(b * n + j).iter_mut().zip(g.row(b * n + i)) {
                                *o += a * v;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::TimeShift {
                x,
                shift,
                frame_rows,
            } => {
                let frames = (g.rows() / frame_rows) as isize;
                let width = frame_rows * g.cols();
                let mut t = Tensor::zeros(g.rows(), g.cols());
                for f in 0..frames {
                    let src = f + shift;
                    if (0..frames).contains(&src) {
                        let (s, d) = (src as usize * width, f as usize * width);
                        for k in 0..width {
                            t.data_mut()[s + k] += g.data()[d + k];
                        }
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::GatherRows(x, index) => {
                let xv = self.value(*x);
                let mut t = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &i) in index.iter().enumerate() {
                    for (o, v) in t.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::Reshape(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, g.clone().reshaped(r, c));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.ng(p) {
                        let slice = g.data()[offset * c..(offset + r) * c].to_vec();
                        self.accumulate(grads, p, Tensor::from_vec(r, c, slice));
                    }
                    offset += r;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let mut ga = Vec::with_capacity(g.rows() * ca);
                let mut gb = Vec::with_capacity(g.rows() * cb);
                for r in 0..g.rows() {
                    let row = g.row(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(g.rows(), ca, ga));
                self.accumulate(grads, *b, Tensor::from_vec(g.rows(), cb, gb));
            }
            Op::SumAll(x) => {
                let (r, c) = self.value(*x).shape();
                self.accumulate(grads, *x, Tensor::filled(r, c, g.data()[0]));
            }
            Op::MeanRows(x) => {
                let (r, c) = self.value(*x).shape();
                let mut t = Tensor::zeros(r, c);
                for i in 0..r {
                    for (o, v) in t.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / r as f64;
                    }
                }
                self.accumulate(grads, *x, t);
            }
            Op::BlockScores { q, k, nq, nk } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (nq, nk) = (*nq, *nk);
                let blocks = qv.rows() / nq;
                let d = qv.cols();
                let mut gq = Tensor::zeros(qv.rows(), d);
                let mut gk = Tensor::zeros(kv.rows(), d);
                for b in 0..blocks {
                    for i in 0..nq {
                        for j in 0..nk {
                            let s = g.at(b * nq + i, j);
                            if s == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                gq.data_mut()[(b * nq + i) * d + c] += s * kv.at(b * nk + j, c);
                                gk.data_mut()[(b * nk + j) * d + c] += s * qv.at(b * nq + i, c);
                            }
                        }
                    }
                }
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
            }
            Op::BlockApply { a, v, nq, nk } => {
                let (av, vv) = (self.value(*a), self.value(*v));
                let (nq, nk) = (*nq, *nk);
                let blocks = av.rows() / nq;
                let mut ga = Tensor::zeros(av.rows(), nk);
                let mut gv = Tensor::zeros(vv.rows(), vv.cols());
                for b in 0..blocks {
                    for i in 0..nq {
                        let gi = g.row(b * nq + i);
                        for j in 0..nk {
                            ga.set(b * nq + i, j, dot(gi, vv.row(b * nk + j)));
                            let w = av.at(b * nq + i, j);
                            for (o, x) in gv.row_mut(b * nk + j).iter_mut().zip(gi) {
                                *o += w * x;
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *v, gv);
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let s = g.data()[0];
                let mut d = probs.clone();
                d[*label] -= 1.0;
                for v in &mut d {
                    *v *= s;
                }
                let k = d.len();
                self.accumulate(grads, *logits, Tensor::from_vec(1, k, d));
            }
        }
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Checks d(loss)/d(input) of `f` against central differences.
    fn check(input: Tensor, f: impl Fn(&mut Tape, Var) -> Var) {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone(), true);
        let out = f(&mut tape, x);
        let loss = tape.sum_all(out);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(input.rows(), input.cols()));
        let h = 1e-5;
        for i in 0..input.len() {
            let eval = |delta: f64| {
                let mut p = input.clone();
                p.data_mut()[i] += delta;
                let mut tape = Tape::new();
                let x = tape.leaf(p, true);
                let out = f(&mut tape, x);
                tape.value(out).sum()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / numeric.abs().max(a.abs()).max(1e-3);
            assert!(err < 1e-5, "entry {i}: analytic {a} vs numeric {numeric}");
        }
    }

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(rows, cols, -1.0, 1.0, &mut rng)
    }

    #[test]
    fn matmul_gradients() {
        let w = rand_tensor(3, 2, 1);
        check(rand_tensor(2, 3, 2), |t, x| {
            let w = t.constant(w.clone());
            t.matmul(x, w)
        });
        let a = rand_tensor(4, 3, 3);
        check(rand_tensor(2, 3, 4), |t, x| {
            let a = t.constant(a.clone());
            let y = t.matmul_nt(a, x);
            t.mul(y, y)
        });
    }

    #[test]
    fn softmax_and_normalize_gradients() {
        let w = rand_tensor(2, 3, 5);
        check(rand_tensor(2, 3, 6), |t, x| {
            let s = t.row_softmax(x);
            let w = t.constant(w.clone());
            t.mul(s, w)
        });
        check(rand_tensor(2, 3, 7), |t, x| {
            let n = t.row_normalize(x);
            let w = t.constant(w.clone());
            t.mul(n, w)
        });
    }

    #[test]
    fn structural_op_gradients() {
        let adj = Arc::new(rand_tensor(2, 2, 8));
        let w = rand_tensor(6, 2, 9);
        check(rand_tensor(6, 2, 10), |t, x| {
            let y = t.frame_mix(x, adj.clone());
            let y = t.time_shift(y, 1, 2);
            let w = t.constant(w.clone());
            t.mul(y, w)
        });
        let idx = Arc::new(vec![2, 0, 2]);
        check(rand_tensor(3, 2, 11), |t, x| {
            let g = t.gather_rows(x, idx.clone());
            let c = t.concat_rows(&[g, x]);
            let r = t.reshape(c, 3, 4);
            t.mul(r, r)
        });
        check(rand_tensor(3, 2, 12), |t, x| {
            let c = t.concat_cols(x, x);
            let m = t.mean_rows(c);
            t.mul(m, m)
        });
    }

    #[test]
    fn attention_gradients() {
        let k = rand_tensor(4, 3, 13);
        let v = rand_tensor(4, 3, 14);
        check(rand_tensor(4, 3, 15), |t, x| {
            let k = t.constant(k.clone());
            let v = t.constant(v.clone());
            let s = t.block_scores(x, k, 2, 2);
            let a = t.row_softmax(s);
            let o = t.block_apply(a, v, 2, 2);
            t.mul(o, o)
        });
        let q = rand_tensor(4, 3, 16);
        check(rand_tensor(4, 3, 17), |t, x| {
            let q = t.constant(q.clone());
            let s = t.block_scores(q, x, 2, 2);
            let a = t.row_softmax(s);
            let o = t.block_apply(a, x, 2, 2);
            t.mul(o, o)
        });
    }

    #[test]
    fn cross_entropy_gradient_and_value() {
        check(rand_tensor(1, 4, 18), |t, x| t.cross_entropy(x, 2));
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(1, 2, vec![0.0, 0.0]));
        let l = tape.cross_entropy(z, 0);
        assert!((tape.scalar(l) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn scalar_and_row_scaling_gradients() {
        let x0 = rand_tensor(3, 2, 19);
        check(rand_tensor(1, 1, 20), |t, s| {
            let x = t.constant(x0.clone());
            let y = t.scale_by(x, s);
            t.mul(y, y)
        });
        check(rand_tensor(3, 1, 21), |t, w| {
            let x = t.constant(x0.clone());
            let y = t.mul_rows(x, w);
            t.mul(y, y)
        });
        let b = rand_tensor(1, 2, 22);
        check(rand_tensor(3, 2, 23), |t, x| {
            let b = t.constant(b.clone());
            let y = t.add_row(x, b);
            let y = t.relu(y);
            t.mul(y, y)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(1, 1, 3.0), true);
        let d = tape.detach(x);
        let y = tape.mul(x, d);
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }
}
