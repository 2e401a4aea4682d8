//! A small reverse-mode differentiation tape over dense row-major matrices.
//!
//! Nodes are appended in evaluation order, so a single reverse sweep over the
//! node list is a valid topological order for the backward pass. Only the
//! operations the encoder, the output network and the joint loss need are
//! provided.

use crate::joint::{constrain_c, constrain_c_backward, JointKlTerm};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor shape does not match data");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    pub fn scalar(v: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `a (n×k) · b (k×m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

/// `a (n×k) · bᵀ` for `b (m×k)`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_bt shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = arow.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ (k×n) · b (n×m)` for `a (n×k)`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_at shape mismatch");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let brow = b.row(r);
        for k in 0..a.cols {
            let akr = a.data[r * a.cols + k];
            if akr == 0.0 {
                continue;
            }
            let orow = &mut out.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += akr * bv;
            }
        }
    }
    out
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise `(x − mean) / sqrt(var + eps)`; returns the inverse std per row.
pub fn layer_norm_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let mut out = Tensor::zeros(x.rows, x.cols);
    let mut rstd = Vec::with_capacity(x.rows);
    let d = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for (o, v) in out.data[r * x.cols..(r + 1) * x.cols].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        rstd.push(inv);
    }
    (out, rstd)
}

/// Row `i` is a softmax over columns `0..=i`; later columns are exactly zero.
pub fn causal_softmax(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let upto = (i + 1).min(x.cols);
        let row = &x.row(i)[..upto];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out.data[i * x.cols + j] = e;
            sum += e;
        }
        for j in 0..upto {
            out.data[i * x.cols + j] /= sum;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Silu(Var),
    LayerNorm(Var, Vec<f64>),
    CausalSoftmax(Var),
    ConcatCols(Vec<Var>),
    ShiftDown(Var, Var),
    Column(Var, usize),
    /// `clamp(offset + scale·x, lo, hi)` per row; masked rows are zero.
    AffineClip { a: Var, offset: Vec<f64>, scale: Vec<f64>, lo: f64, hi: f64, zero: Vec<bool> },
    ConstrainC(Var),
    JointKl { tau_hat: Var, logits: Var, c: Var, grads: JointKlGrads },
    Sum(Var),
}

struct JointKlGrads {
    tau_hat: Vec<f64>,
    logits: Vec<f64>,
    c: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// `a + b` with the row vector `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((bv.rows, bv.cols), (1, av.cols));
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, y) in v.data[r * v.cols..(r + 1) * v.cols].iter_mut().zip(&bv.data) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, b))
    }

    /// `a ∘ b` with the row vector `b` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!((bv.rows, bv.cols), (1, av.cols));
        let mut v = av.clone();
        for r in 0..v.rows {
            for (x, y) in v.data[r * v.cols..(r + 1) * v.cols].iter_mut().zip(&bv.data) {
                *x *= y;
            }
        }
        self.push(v, Op::MulRow(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x *= s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = silu(*x));
        self.push(v, Op::Silu(a))
    }

    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (v, rstd) = layer_norm_rows(self.value(a));
        self.push(v, Op::LayerNorm(a, rstd))
    }

    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let v = causal_softmax(self.value(a));
        self.push(v, Op::CausalSoftmax(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows, rows, "concat row mismatch");
                v.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
                off += pv.cols;
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// `[first; rest[0..n−1]]` where `n` is the row count of `rest`.
    pub fn shift_down(&mut self, first: Var, rest: Var) -> Var {
        let (fv, rv) = (self.value(first), self.value(rest));
        assert_eq!((fv.rows, fv.cols), (1, rv.cols));
        let mut v = Tensor::zeros(rv.rows, rv.cols);
        if rv.rows > 0 {
            v.data[..rv.cols].copy_from_slice(&fv.data);
            v.data[rv.cols..].copy_from_slice(&rv.data[..(rv.rows - 1) * rv.cols]);
        }
        self.push(v, Op::ShiftDown(first, rest))
    }

    pub fn column(&mut self, a: Var, c: usize) -> Var {
        let av = self.value(a);
        let v = Tensor::from_vec(av.rows, 1, (0..av.rows).map(|r| av.get(r, c)).collect());
        self.push(v, Op::Column(a, c))
    }

    /// Row-wise `clamp(offset[r] + scale[r]·a[r], lo, hi)` on an `n×1`
    /// column; rows with `zero[r]` set are replaced by 0 and pass no gradient.
    pub fn affine_clip(&mut self, a: Var, offset: Vec<f64>, scale: Vec<f64>, lo: f64, hi: f64, zero: Vec<bool>) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols, 1);
        assert!(av.rows == zero.len() && av.rows == offset.len() && av.rows == scale.len());
        let data = (0..av.rows)
            .map(|r| if zero[r] { 0.0 } else { (offset[r] + scale[r] * av.data[r]).clamp(lo, hi) })
            .collect();
        let v = Tensor::from_vec(av.rows, 1, data);
        self.push(v, Op::AffineClip { a, offset, scale, lo, hi, zero })
    }

    /// Applies the norm-bounding map to a `1×M` row.
    pub fn constrain_c(&mut self, raw: Var) -> Var {
        let v = Tensor::row_vector(constrain_c(&self.value(raw).data));
        self.push(v, Op::ConstrainC(raw))
    }

    /// Per-row joint sender/receiver KL estimates as an `n×1` column.
    /// `tau_hat` is `n×1`, `logits` is `n×M` and `c` is the `1×M` correlation
    /// vector. Row `r` averages the estimates of the sender draws in
    /// `groups[r]`; each draw rescales `c` by its own accuracy ratio.
    pub fn joint_kl(&mut self, tau_hat: Var, logits: Var, c: Var, groups: &[Vec<JointKlTerm>]) -> Var {
        let (tv, lv, cv) = (self.value(tau_hat), self.value(logits), self.value(c));
        assert_eq!(tv.rows, groups.len());
        assert_eq!(lv.rows, groups.len());
        let m = lv.cols;
        let mut out = Vec::with_capacity(groups.len());
        let mut grads = JointKlGrads {
            tau_hat: Vec::with_capacity(groups.len()),
            logits: vec![0.0; groups.len() * m],
            c: vec![0.0; groups.len() * m],
        };
        let mut c_eff = vec![0.0; m];
        for (r, group) in groups.iter().enumerate() {
            assert!(!group.is_empty(), "empty sender group");
            let inv = 1.0 / group.len() as f64;
            let (mut value, mut d_tau) = (0.0, 0.0);
            for term in group {
                for (s, x) in c_eff.iter_mut().zip(&cv.data) {
                    *s = x * term.c_scale;
                }
                let e = term.evaluate(tv.data[r], lv.row(r), &c_eff);
                value += e.value * inv;
                d_tau += e.d_tau_hat * inv;
                for (g, d) in grads.logits[r * m..(r + 1) * m].iter_mut().zip(&e.d_logits) {
                    *g += d * inv;
                }
                for (g, d) in grads.c[r * m..(r + 1) * m].iter_mut().zip(&e.d_c) {
                    *g += d * term.c_scale * inv;
                }
            }
            out.push(value);
            grads.tau_hat.push(d_tau);
        }
        let v = Tensor::from_vec(groups.len(), 1, out);
        self.push(v, Op::JointKl { tau_hat, logits, c, grads })
    }

    /// Sum of all entries, as a `1×1` node.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Reverse sweep from the scalar `output` with seed gradient 1.
    pub fn backward(&self, output: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let out = &self.nodes[output.0].value;
        grads[output.0] = Some(Tensor::from_vec(out.rows, out.cols, vec![1.0; out.len()]));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (x, y) in gb.data.iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = g.clone();
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            let gi = g.data[r * g.cols + c];
                            ga.data[r * g.cols + c] = gi * bv.data[c];
                            gb.data[c] += gi * av.data[r * g.cols + c];
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    let mut ga = g.clone();
                    ga.data.iter_mut().for_each(|x| *x *= s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_bt(&g, self.value(*b));
                    let gb = matmul_at(self.value(*a), &g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ: dA = g b, dB = gᵀ a
                    let ga = matmul(&g, self.value(*b));
                    let gb = matmul_at(&g, self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let mut ga = g.clone();
                    for (x, v) in ga.data.iter_mut().zip(&av.data) {
                        *x *= silu_grad(*v);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, rstd) => {
                    let y = &node.value;
                    let d = y.cols as f64;
                    let mut ga = Tensor::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gy.iter().sum::<f64>() / d;
                        let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d;
                        for c in 0..y.cols {
                            ga.data[r * y.cols + c] = rstd[r] * (gy[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::CausalSoftmax(a) => {
                    let p = &node.value;
                    let mut ga = Tensor::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let dot: f64 = pr.iter().zip(gr).map(|(x, y)| x * y).sum();
                        for c in 0..p.cols {
                            ga.data[r * p.cols + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols;
                        let mut gp = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            gp.data[r * pc..(r + 1) * pc].copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        accumulate(&mut grads, *p, gp);
                        off += pc;
                    }
                }
                Op::ShiftDown(first, rest) => {
                    let cols = g.cols;
                    if g.rows > 0 {
                        accumulate(&mut grads, *first, Tensor::from_vec(1, cols, g.data[..cols].to_vec()));
                        let mut gr = Tensor::zeros(g.rows, cols);
                        gr.data[..(g.rows - 1) * cols].copy_from_slice(&g.data[cols..]);
                        accumulate(&mut grads, *rest, gr);
                    }
                }
                Op::Column(a, c) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    for r in 0..av.rows {
                        ga.data[r * av.cols + c] = g.data[r];
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::AffineClip { a, offset, scale, lo, hi, zero } => {
                    let av = self.value(*a);
                    let data = (0..av.rows)
                        .map(|r| {
                            let y = offset[r] + scale[r] * av.data[r];
                            if zero[r] || y < *lo || y > *hi {
                                0.0
                            } else {
                                scale[r] * g.data[r]
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *a, Tensor::from_vec(av.rows, 1, data));
                }
                Op::ConstrainC(raw) => {
                    let gr = constrain_c_backward(&self.value(*raw).data, &g.data);
                    accumulate(&mut grads, *raw, Tensor::row_vector(gr));
                }
                Op::JointKl { tau_hat, logits, c, grads: local } => {
                    let rows = g.rows;
                    let m = self.value(*logits).cols;
                    let gt: Vec<f64> = (0..rows).map(|r| g.data[r] * local.tau_hat[r]).collect();
                    let mut gl = Vec::with_capacity(rows * m);
                    let mut gc = vec![0.0; m];
                    for r in 0..rows {
                        gl.extend(local.logits[r * m..(r + 1) * m].iter().map(|d| d * g.data[r]));
                        for (acc, d) in gc.iter_mut().zip(&local.c[r * m..(r + 1) * m]) {
                            *acc += d * g.data[r];
                        }
                    }
                    accumulate(&mut grads, *tau_hat, Tensor::from_vec(rows, 1, gt));
                    accumulate(&mut grads, *logits, Tensor::from_vec(rows, m, gl));
                    accumulate(&mut grads, *c, Tensor::row_vector(gc));
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, Tensor::from_vec(av.rows, av.cols, vec![g.data[0]; av.len()]));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}
