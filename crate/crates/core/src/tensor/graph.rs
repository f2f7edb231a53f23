//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for nodes that depend on
//! a differentiable leaf. The heavier ops (attention, layer norm, cross-entropy)
//! are fused single nodes with hand-written adjoints.

use thiserror::Error;

use super::mat::{dot, gemm_nn, gemm_nt, gemm_tn, Mat};
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("cannot normalize a zero vector (row {0})")]
    ZeroNorm(usize),
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    AddConst(Var),
    ScaleBy(Var, Var),
    QuickGelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Abs(Var),
    Min(Var, Var),
    Max(Var, Var),
    Clamp(Var, T, T),
    LayerNorm { x: Var, g: Var, b: Var, mean: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Mat<T>> },
    L2Normalize { x: Var, norms: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Mat<T> },
    Transpose(Var),
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn cols_of<T: Scalar>(m: &Mat<T>, start: usize, len: usize) -> Mat<T> {
    let mut out = Mat::zeros(m.rows(), len);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
    }
    out
}

fn add_cols<T: Scalar>(dst: &mut Mat<T>, start: usize, src: &Mat<T>) {
    for r in 0..src.rows() {
        let d = &mut dst.row_mut(r)[start..start + src.cols()];
        for (a, &b) in d.iter_mut().zip(src.row(r)) {
            *a += b;
        }
    }
}

fn col_sums<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    let mut out = Mat::zeros(1, m.cols());
    for r in 0..m.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}

fn zip_map<T: Scalar>(a: &Mat<T>, b: &Mat<T>, f: impl Fn(T, T) -> T) -> Mat<T> {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Mat::from_vec(
        a.rows(),
        a.cols(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const GELU_K: f64 = 1.702;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Mat<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b), &[a, b])
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).matmul(self.value(w));
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, out.cols()), "linear bias shape");
            for r in 0..out.rows() {
                for (o, &bv) in out.row_mut(r).iter_mut().zip(bias.data()) {
                    *o += bv;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        self.push(out, Op::Div(a, b), &[a, b])
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| if x <= y { x } else { y });
        self.push(out, Op::Min(a, b), &[a, b])
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| if x >= y { x } else { y });
        self.push(out, Op::Max(a, b), &[a, b])
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.shape(), (1, self.value(a).cols()), "add_row shape");
        let mut out = self.value(a).clone();
        let rv = r.data().to_vec();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(&rv) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::Scale(a, k), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddConst(a), &[a])
    }

    /// Multiplies every entry of `a` by the 1x1 value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.value(s).item();
        let out = self.value(a).map(|x| x * k);
        self.push(out, Op::ScaleBy(a, s), &[a, s])
    }

    /// `x * sigmoid(1.702 x)`
    pub fn quick_gelu(&mut self, a: Var) -> Var {
        let k = T::of(GELU_K);
        let out = self.value(a).map(|x| x * sigmoid(k * x));
        self.push(out, Op::QuickGelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::exp);
        self.push(out, Op::Exp(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(T::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), &[a])
    }

    /// Row-wise layer normalization with gain `g` and bias `b` (both `1 x cols`).
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: T) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let gv = self.value(g).data().to_vec();
        let bv = self.value(b).data().to_vec();
        assert_eq!(gv.len(), cols, "layer_norm gain shape");
        let n = T::of(cols as f64);
        let mut out = Mat::zeros(rows, cols);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mu = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mu) * rs * gv[c] + bv[c];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        self.push(out, Op::LayerNorm { x, g, b, mean, rstd }, &[x, g, b])
    }

    /// Multi-head scaled dot-product attention on already-projected `q`, `k`, `v`.
    ///
    /// With `causal`, query `i` only attends to keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (lq, d) = qv.shape();
        let lk = kv.rows();
        assert_eq!(kv.cols(), d, "attention key width");
        assert_eq!(vv.shape(), (lk, d), "attention value shape");
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Mat::zeros(lq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = cols_of(qv, h * dh, dh);
            let kh = cols_of(kv, h * dh, dh);
            let vh = cols_of(vv, h * dh, dh);
            let mut p = qh.matmul_t(&kh);
            for i in 0..lq {
                let row = p.row_mut(i);
                for (j, s) in row.iter_mut().enumerate() {
                    *s = if causal && j > i { T::neg_infinity() } else { *s * scale };
                }
                softmax_row_in_place(row);
            }
            let oh = p.matmul(&vh);
            add_cols(&mut out, h * dh, &oh);
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = dot(xv.row(r), xv.row(r)).sqrt();
            if !(n > T::zero()) {
                return Err(TensorError::ZeroNorm(r));
            }
            for o in out.row_mut(r) {
                *o /= n;
            }
            norms.push(n);
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`, as a 1x1 value.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        let mut probs = lv.clone();
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = lv.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
            total += lse - row[t];
            softmax_row_in_place(probs.row_mut(r));
        }
        let n = T::of(targets.len().max(1) as f64);
        let out = Mat::scalar(total / n);
        self.push(out, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, &[logits])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows out of range");
        let out = Mat::from_vec(len, av.cols(), av.data()[start * av.cols()..(start + len) * av.cols()].to_vec());
        self.push(out, Op::SliceRows { a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let out = cols_of(av, start, len);
        self.push(out, Op::SliceCols { a, start }, &[a])
    }

    /// Rows of `a` in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(idx.len(), av.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows { a, idx: idx.to_vec() }, &[a])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows width");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Mat::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = Mat::scalar(av.sum() / T::of(av.len() as f64));
        self.push(out, Op::Mean(a), &[a])
    }

    /// Reverse pass from the 1x1 node `loss`.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, d: Mat<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&d),
            slot @ None => *slot = Some(d),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    gemm_nt(g, bv, &mut da);
                    self.acc(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    gemm_tn(av, g, &mut db);
                    self.acc(grads, b, db);
                }
            }
            &Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    let mut da = Mat::zeros(av.rows(), av.cols());
                    gemm_nn(g, bv, &mut da);
                    self.acc(grads, a, da);
                }
                if self.needs(b) {
                    let mut db = Mat::zeros(bv.rows(), bv.cols());
                    gemm_tn(g, av, &mut db);
                    self.acc(grads, b, db);
                }
            }
            &Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(x), self.value(w));
                if self.needs(x) {
                    let mut dx = Mat::zeros(xv.rows(), xv.cols());
                    gemm_nt(g, wv, &mut dx);
                    self.acc(grads, x, dx);
                }
                if self.needs(w) {
                    let mut dw = Mat::zeros(wv.rows(), wv.cols());
                    gemm_tn(xv, g, &mut dw);
                    self.acc(grads, w, dw);
                }
                if let Some(b) = b {
                    self.acc(grads, b, col_sums(g));
                }
            }
            &Op::Add(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, g.clone());
                self.acc(grads, b, g.map(|x| -x));
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.needs(a) {
                    self.acc(grads, a, zip_map(g, bv, |gi, bi| gi * bi));
                }
                if self.needs(b) {
                    self.acc(grads, b, zip_map(g, av, |gi, ai| gi * ai));
                }
            }
            &Op::Div(a, b) => {
                let bv = self.value(b);
                if self.needs(a) {
                    self.acc(grads, a, zip_map(g, bv, |gi, bi| gi / bi));
                }
                if self.needs(b) {
                    // d(a/b)/db = -(a/b)/b = -y/b
                    let t = zip_map(y, bv, |yi, bi| yi / bi);
                    self.acc(grads, b, zip_map(g, &t, |gi, ti| -gi * ti));
                }
            }
            &Op::AddRow(a, row) => {
                self.acc(grads, a, g.clone());
                if self.needs(row) {
                    self.acc(grads, row, col_sums(g));
                }
            }
            &Op::Scale(a, k) => self.acc(grads, a, g.map(|x| x * k)),
            &Op::AddConst(a) => self.acc(grads, a, g.clone()),
            &Op::ScaleBy(a, s) => {
                let k = self.value(s).item();
                if self.needs(a) {
                    self.acc(grads, a, g.map(|x| x * k));
                }
                if self.needs(s) {
                    let ds = dot(g.data(), self.value(a).data());
                    self.acc(grads, s, Mat::scalar(ds));
                }
            }
            &Op::QuickGelu(a) => {
                let k = T::of(GELU_K);
                let d = zip_map(g, self.value(a), |gi, x| {
                    let s = sigmoid(k * x);
                    gi * (s + k * x * s * (T::one() - s))
                });
                self.acc(grads, a, d);
            }
            &Op::Relu(a) => {
                let d = zip_map(g, self.value(a), |gi, x| if x > T::zero() { gi } else { T::zero() });
                self.acc(grads, a, d);
            }
            &Op::Sigmoid(a) => {
                self.acc(grads, a, zip_map(g, y, |gi, s| gi * s * (T::one() - s)));
            }
            &Op::Exp(a) => self.acc(grads, a, zip_map(g, y, |gi, e| gi * e)),
            &Op::Abs(a) => {
                let d = zip_map(g, self.value(a), |gi, x| {
                    if x > T::zero() {
                        gi
                    } else if x < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, a, d);
            }
            &Op::Min(a, b) | &Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (av, bv) = (self.value(a), self.value(b));
                let pick_a: Vec<bool> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(&x, &z)| if is_min { x <= z } else { x >= z })
                    .collect();
                let mut da = Mat::zeros(g.rows(), g.cols());
                let mut db = Mat::zeros(g.rows(), g.cols());
                for (k, &gi) in g.data().iter().enumerate() {
                    if pick_a[k] {
                        da.data_mut()[k] = gi;
                    } else {
                        db.data_mut()[k] = gi;
                    }
                }
                self.acc(grads, a, da);
                self.acc(grads, b, db);
            }
            &Op::Clamp(a, lo, hi) => {
                let d = zip_map(g, self.value(a), |gi, x| if x > lo && x < hi { gi } else { T::zero() });
                self.acc(grads, a, d);
            }
            Op::LayerNorm { x, g: gain, b, mean, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (rows, cols) = xv.shape();
                let n = T::of(cols as f64);
                let mut dx = Mat::zeros(rows, cols);
                let mut dg = Mat::zeros(1, cols);
                let mut db = Mat::zeros(1, cols);
                let mut xhat = vec![T::zero(); cols];
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    let (mu, rs) = (mean[r], rstd[r]);
                    let gr = g.row(r);
                    for c in 0..cols {
                        xhat[c] = (xv.get(r, c) - mu) * rs;
                        dxhat[c] = gr[c] * gv.data()[c];
                        dg.data_mut()[c] += gr[c] * xhat[c];
                        db.data_mut()[c] += gr[c];
                    }
                    let m1 = dxhat.iter().copied().sum::<T>() / n;
                    let m2 = dot(&dxhat, &xhat) / n;
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = rs * (dxhat[c] - m1 - xhat[c] * m2);
                    }
                }
                self.acc(grads, *x, dx);
                self.acc(grads, *gain, dg);
                self.acc(grads, *b, db);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / heads;
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut dq = Mat::zeros(qv.rows(), d);
                let mut dk = Mat::zeros(kv.rows(), d);
                let mut dv = Mat::zeros(vv.rows(), d);
                for (h, p) in probs.iter().enumerate() {
                    let qh = cols_of(qv, h * dh, dh);
                    let kh = cols_of(kv, h * dh, dh);
                    let vh = cols_of(vv, h * dh, dh);
                    let doh = cols_of(g, h * dh, dh);
                    let mut dvh = Mat::zeros(vh.rows(), dh);
                    gemm_tn(p, &doh, &mut dvh);
                    let mut dp = Mat::zeros(p.rows(), p.cols());
                    gemm_nt(&doh, &vh, &mut dp);
                    // softmax adjoint, then the 1/sqrt(dh) score scale
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let inner = dot(dp.row(r), pr);
                        for (c, s) in dp.row_mut(r).iter_mut().enumerate() {
                            *s = pr[c] * (*s - inner) * scale;
                        }
                    }
                    let mut dqh = Mat::zeros(qh.rows(), dh);
                    gemm_nn(&dp, &kh, &mut dqh);
                    let mut dkh = Mat::zeros(kh.rows(), dh);
                    gemm_tn(&dp, &qh, &mut dkh);
                    add_cols(&mut dq, h * dh, &dqh);
                    add_cols(&mut dk, h * dh, &dkh);
                    add_cols(&mut dv, h * dh, &dvh);
                }
                self.acc(grads, *q, dq);
                self.acc(grads, *k, dk);
                self.acc(grads, *v, dv);
            }
            Op::L2Normalize { x, norms } => {
                let mut dx = Mat::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let proj = dot(gr, yr);
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - yr[c] * proj) / norms[r];
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g.item() / T::of(targets.len().max(1) as f64);
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= T::one();
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                }
                self.acc(grads, *logits, d);
            }
            &Op::Transpose(a) => self.acc(grads, a, g.transpose()),
            &Op::SliceRows { a, start } => {
                let av = self.value(a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                let c = av.cols();
                d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.acc(grads, a, d);
            }
            &Op::SliceCols { a, start } => {
                let av = self.value(a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                add_cols(&mut d, start, g);
                self.acc(grads, a, d);
            }
            Op::GatherRows { a, idx } => {
                let av = self.value(*a);
                let mut d = Mat::zeros(av.rows(), av.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &gv) in d.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape(p);
                    if self.needs(p) {
                        let d = Mat::from_vec(r, c, g.data()[offset * c..(offset + r) * c].to_vec());
                        self.acc(grads, p, d);
                    }
                    offset += r;
                }
            }
            &Op::Sum(a) => {
                let (r, c) = self.shape(a);
                self.acc(grads, a, Mat::filled(r, c, g.item()));
            }
            &Op::Mean(a) => {
                let (r, c) = self.shape(a);
                self.acc(grads, a, Mat::filled(r, c, g.item() / T::of((r * c) as f64)));
            }
        }
    }
}
