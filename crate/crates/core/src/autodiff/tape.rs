//! Operation tape. Every forward op appends a node holding its value and
//! enough context to run its adjoint; [`Tape::backward`] walks the nodes in
//! exact reverse order.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::util::{mix_seed, unit_from_hash};

use super::params::ParamSet;
use super::tensor::{mm, mm_nt, mm_tn, transpose, Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies one dropout application so its mask is a pure function of
/// (seed, layer, step) regardless of evaluation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

#[derive(Debug, Clone)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, inv_std: Vec<T> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, rows: Range<usize>, cols: Range<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    Gather { x: Var, idx: Vec<usize> },
    Mask { x: Var, mask: Vec<T> },
    Mean(Var),
    Sum(Var),
    Cosine { a: Var, b: Var, na: Vec<T>, nb: Vec<T> },
    NormalizeRows { x: Var, norms: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Guard against division by zero norms.
const NORM_EPS: f64 = 1e-12;

/// Lane layout of a 2-D buffer along `axis`: (lane count, lane length,
/// element stride, lane-to-lane offset).
fn lanes(rows: usize, cols: usize, axis: usize) -> (usize, usize, usize, usize) {
    if axis == 1 {
        (rows, cols, 1, cols)
    } else {
        (cols, rows, cols, 1)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFiniteValue(name.to_string()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf: input data or a parameter copy.
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, "leaf")
    }

    /// Pushes every parameter as a leaf; the returned vars are indexed like
    /// the parameter set.
    pub fn bind(&mut self, params: &ParamSet<T>) -> Result<Vec<Var>> {
        params
            .iter()
            .map(|p| self.leaf(p.value.clone()))
            .collect()
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::ShapeMismatch(format!("{op}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn map(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>, name: &str) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|a| f(*a)).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>, name: &str) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        self.push(out, op, name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (k2, n)) = (self.dims(a)?, self.dims(b)?);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul: {m}×{k} · {k2}×{n}")));
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((m, k), (n, k2)) = (self.dims(a)?, self.dims(b)?);
        if k != k2 {
            return Err(Error::ShapeMismatch(format!("matmul_nt: {m}×{k} · ({n}×{k2})ᵀ")));
        }
        let data = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(Tensor::matrix(m, n, data)?, Op::MatMulNt(a, b), "matmul_nt")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let data = transpose(self.value(x).data(), r, c);
        self.push(Tensor::matrix(c, r, data)?, Op::Transpose(x), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if self.value(row).len() != c {
            return Err(Error::ShapeMismatch(format!(
                "row broadcast: {r}×{c} with {:?}",
                self.value(row).shape()
            )));
        }
        let (vx, vr) = (self.value(x).data(), self.value(row).data());
        let data = vx
            .iter()
            .enumerate()
            .map(|(i, a)| if mul { *a * vr[i % c] } else { *a + vr[i % c] })
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        if mul {
            self.push(out, Op::MulRow(x, row), "mul_row")
        } else {
            self.push(out, Op::AddRow(x, row), "add_row")
        }
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.row_broadcast(x, bias, false)
    }

    /// Multiplies every row elementwise by a length-`cols` gain.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        self.row_broadcast(x, gain, true)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.map(x, |a| a * s, Op::Scale(x, s), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.map(x, |a| a + s, Op::AddScalar(x), "add_scalar")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map(x, |a| a.tanh(), Op::Tanh(x), "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, |a| a.max(T::zero()), Op::Relu(x), "relu")
    }

    fn check_axis(axis: usize) -> Result<()> {
        if axis > 1 {
            return Err(Error::ShapeMismatch(format!("axis {axis} on a matrix")));
        }
        Ok(())
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        Self::check_axis(axis)?;
        let (r, c) = self.dims(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        let (n, len, stride, off) = lanes(r, c, axis);
        for l in 0..n {
            let o = l * off;
            let idx = |i: usize| o + i * stride;
            let max = (0..len).map(|i| src[idx(i)]).fold(T::neg_infinity(), T::max);
            let sum: T = (0..len).map(|i| (src[idx(i)] - max).exp()).sum();
            let lse = max + sum.ln();
            for i in 0..len {
                out[idx(i)] = if log {
                    src[idx(i)] - lse
                } else {
                    (src[idx(i)] - max).exp() / sum
                };
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        if log {
            self.push(t, Op::LogSoftmax { x, axis }, "log_softmax")
        } else {
            self.push(t, Op::Softmax { x, axis }, "softmax")
        }
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Normalizes each lane along `axis` to zero mean and unit variance
    /// (population variance plus `eps`). Gain and bias are separate ops.
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        Self::check_axis(axis)?;
        let (r, c) = self.dims(x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        let (n, len, stride, off) = lanes(r, c, axis);
        let nl = T::from_usize(len).unwrap();
        let mut inv_std = Vec::with_capacity(n);
        for l in 0..n {
            let o = l * off;
            let mean = (0..len).map(|i| src[o + i * stride]).sum::<T>() / nl;
            let var = (0..len)
                .map(|i| {
                    let d = src[o + i * stride] - mean;
                    d * d
                })
                .sum::<T>()
                / nl;
            let is = T::one() / (var + eps).sqrt();
            for i in 0..len {
                out[o + i * stride] = (src[o + i * stride] - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        self.push(t, Op::LayerNorm { x, axis, inv_std }, "layer_norm")
    }

    /// Concatenates matrices along rows (`axis` 0) or columns (`axis` 1).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        Self::check_axis(axis)?;
        if parts.is_empty() {
            return Err(Error::ShapeMismatch("concat of nothing".into()));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| self.dims(*p)).collect::<Result<_>>()?;
        let out = if axis == 0 {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::ShapeMismatch(format!("concat rows: {dims:?}")));
            }
            let r: usize = dims.iter().map(|d| d.0).sum();
            let mut data = Vec::with_capacity(r * c);
            for p in parts {
                data.extend_from_slice(self.value(*p).data());
            }
            Tensor::matrix(r, c, data)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::ShapeMismatch(format!("concat cols: {dims:?}")));
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for (p, d) in parts.iter().zip(&dims) {
                    data.extend_from_slice(&self.value(*p).data()[i * d.1..(i + 1) * d.1]);
                }
            }
            Tensor::matrix(r, c, data)?
        };
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, "concat")
    }

    /// Rectangular sub-block.
    pub fn slice(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if rows.end > r || cols.end > c || rows.start >= rows.end || cols.start >= cols.end {
            return Err(Error::ShapeMismatch(format!(
                "slice {rows:?}×{cols:?} of {r}×{c}"
            )));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for i in rows.clone() {
            data.extend_from_slice(&src[i * c + cols.start..i * c + cols.end]);
        }
        let out = Tensor::matrix(rows.len(), cols.len(), data)?;
        self.push(out, Op::Slice { x, rows, cols }, "slice")
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let (r, _) = self.dims(x)?;
        self.slice(x, 0..r, cols)
    }

    /// Rows of `x` in the order given by `idx` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if let Some(bad) = idx.iter().find(|i| **i >= r) {
            return Err(Error::ShapeMismatch(format!("row {bad} of {r}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, "gather_rows")
    }

    /// Elements at flat (row-major) positions, as an `n×1` column.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(bad) = idx.iter().find(|i| **i >= src.len()) {
            return Err(Error::ShapeMismatch(format!("element {bad} of {}", src.len())));
        }
        let data = idx.iter().map(|i| src[*i]).collect();
        let out = Tensor::matrix(idx.len(), 1, data)?;
        self.push(out, Op::Gather { x, idx: idx.to_vec() }, "gather")
    }

    fn mask(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| *a * *m).collect();
        let out = Tensor::new(v.shape().to_vec(), data)?;
        self.push(out, Op::Mask { x, mask }, "dropout")
    }

    fn keep_scale(p: f64) -> Result<T> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidConfig(format!("dropout probability {p} outside [0, 1)")));
        }
        Ok(T::lit(1.0 / (1.0 - p)))
    }

    /// Inverted dropout: in training each element survives with probability
    /// `1 − p` and is scaled by `1/(1 − p)`; otherwise the identity.
    pub fn dropout(&mut self, x: Var, p: f64, train: bool, key: DropoutKey) -> Result<Var> {
        let s = Self::keep_scale(p)?;
        if !train || p == 0.0 {
            return Ok(x);
        }
        let base = mix_seed(&[key.seed, key.layer, key.step]);
        let mask = (0..self.value(x).len())
            .map(|i| {
                if unit_from_hash(mix_seed(&[base, i as u64])) >= p {
                    s
                } else {
                    T::zero()
                }
            })
            .collect();
        self.mask(x, mask)
    }

    /// Dropout of whole rows (e.g. frames of a window).
    pub fn dropout_rows(&mut self, x: Var, p: f64, train: bool, key: DropoutKey) -> Result<Var> {
        let s = Self::keep_scale(p)?;
        if !train || p == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.dims(x)?;
        let base = mix_seed(&[key.seed, key.layer, key.step]);
        let mut mask = Vec::with_capacity(r * c);
        for i in 0..r {
            let keep = unit_from_hash(mix_seed(&[base, i as u64])) >= p;
            mask.extend(std::iter::repeat_n(if keep { s } else { T::zero() }, c));
        }
        self.mask(x, mask)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = T::from_usize(v.len()).unwrap();
        let m = v.data().iter().copied().sum::<T>() / n;
        self.push(Tensor::scalar(m), Op::Mean(x), "mean")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Row-wise cosine similarity of two equally shaped matrices, as an
    /// `rows×1` column. Zero rows have similarity 0.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_similarity")?;
        let (r, c) = self.dims(a)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let eps = T::lit(NORM_EPS);
        let mut out = Vec::with_capacity(r);
        let (mut na, mut nb) = (Vec::with_capacity(r), Vec::with_capacity(r));
        for i in 0..r {
            let (x, y) = (&va[i * c..(i + 1) * c], &vb[i * c..(i + 1) * c]);
            let dot = x.iter().zip(y).map(|(p, q)| *p * *q).sum::<T>();
            let nx = x.iter().map(|p| *p * *p).sum::<T>().sqrt().max(eps);
            let ny = y.iter().map(|p| *p * *p).sum::<T>().sqrt().max(eps);
            out.push(dot / (nx * ny));
            na.push(nx);
            nb.push(ny);
        }
        let t = Tensor::matrix(r, 1, out)?;
        self.push(t, Op::Cosine { a, b, na, nb }, "cosine_similarity")
    }

    /// Scales each row to unit Euclidean length.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = self.value(x).data();
        let eps = T::lit(NORM_EPS);
        let mut data = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let n = row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(eps);
            data.extend(row.iter().map(|v| *v / n));
            norms.push(n);
        }
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(out, Op::NormalizeRows { x, norms }, "normalize_rows")
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.adjoint(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let gd = g.data();
        let like = |v: Var, data: Vec<T>| Tensor::new(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.dims(*a)?, self.dims(*b)?);
                let da = mm_nt(gd, self.value(*b).data(), m, n, k);
                let db = mm_tn(self.value(*a).data(), gd, m, k, n);
                accumulate(grads, *a, like(*a, da)?);
                accumulate(grads, *b, like(*b, db)?);
            }
            Op::MatMulNt(a, b) => {
                let ((m, k), (n, _)) = (self.dims(*a)?, self.dims(*b)?);
                let da = mm(gd, self.value(*b).data(), m, n, k);
                let db = mm_tn(gd, self.value(*a).data(), m, n, k);
                accumulate(grads, *a, like(*a, da)?);
                accumulate(grads, *b, like(*b, db)?);
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x)?;
                accumulate(grads, *x, like(*x, transpose(gd, c, r))?);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, like(*a, gd.to_vec())?);
                accumulate(grads, *b, like(*b, gd.to_vec())?);
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, like(*a, gd.to_vec())?);
                accumulate(grads, *b, like(*b, gd.iter().map(|v| -*v).collect())?);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(vb).map(|(g, y)| *g * *y).collect();
                let db = gd.iter().zip(va).map(|(g, x)| *g * *x).collect();
                accumulate(grads, *a, like(*a, da)?);
                accumulate(grads, *b, like(*b, db)?);
            }
            Op::AddRow(x, row) => {
                let c = self.value(*row).len();
                let mut dr = vec![T::zero(); c];
                for (j, v) in gd.iter().enumerate() {
                    dr[j % c] = dr[j % c] + *v;
                }
                accumulate(grads, *x, like(*x, gd.to_vec())?);
                accumulate(grads, *row, like(*row, dr)?);
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (self.value(*x).data(), self.value(*row).data());
                let c = vr.len();
                let mut dr = vec![T::zero(); c];
                let mut dx = Vec::with_capacity(gd.len());
                for (j, v) in gd.iter().enumerate() {
                    dr[j % c] = dr[j % c] + *v * vx[j];
                    dx.push(*v * vr[j % c]);
                }
                accumulate(grads, *x, like(*x, dx)?);
                accumulate(grads, *row, like(*row, dr)?);
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, like(*x, gd.iter().map(|v| *v * *s).collect())?);
            }
            Op::AddScalar(x) => accumulate(grads, *x, like(*x, gd.to_vec())?),
            Op::Tanh(x) => {
                let d = gd.iter().zip(y).map(|(g, t)| *g * (T::one() - *t * *t)).collect();
                accumulate(grads, *x, like(*x, d)?);
            }
            Op::Sigmoid(x) => {
                let d = gd.iter().zip(y).map(|(g, s)| *g * *s * (T::one() - *s)).collect();
                accumulate(grads, *x, like(*x, d)?);
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(vx)
                    .map(|(g, a)| if *a > T::zero() { *g } else { T::zero() })
                    .collect();
                accumulate(grads, *x, like(*x, d)?);
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (r, c) = self.dims(*x)?;
                let mut d = vec![T::zero(); r * c];
                let (n, len, stride, off) = lanes(r, c, *axis);
                for l in 0..n {
                    let o = l * off;
                    let at = |i: usize| o + i * stride;
                    if log {
                        let gs: T = (0..len).map(|i| gd[at(i)]).sum();
                        for i in 0..len {
                            d[at(i)] = gd[at(i)] - y[at(i)].exp() * gs;
                        }
                    } else {
                        let dot: T = (0..len).map(|i| gd[at(i)] * y[at(i)]).sum();
                        for i in 0..len {
                            d[at(i)] = y[at(i)] * (gd[at(i)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, like(*x, d)?);
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (r, c) = self.dims(*x)?;
                let mut d = vec![T::zero(); r * c];
                let (n, len, stride, off) = lanes(r, c, *axis);
                let nl = T::from_usize(len).unwrap();
                for (l, is) in inv_std.iter().enumerate().take(n) {
                    let o = l * off;
                    let at = |i: usize| o + i * stride;
                    let mg = (0..len).map(|i| gd[at(i)]).sum::<T>() / nl;
                    let mgy = (0..len).map(|i| gd[at(i)] * y[at(i)]).sum::<T>() / nl;
                    for i in 0..len {
                        d[at(i)] = *is * (gd[at(i)] - mg - y[at(i)] * mgy);
                    }
                }
                accumulate(grads, *x, like(*x, d)?);
            }
            Op::Concat { parts, axis } => {
                let (_, c) = node.value.dims()?;
                let mut row_off = 0;
                let mut col_off = 0;
                for p in parts {
                    let (pr, pc) = self.dims(*p)?;
                    let mut d = Vec::with_capacity(pr * pc);
                    if *axis == 0 {
                        d.extend_from_slice(&gd[row_off * c..(row_off + pr) * c]);
                        row_off += pr;
                    } else {
                        for i in 0..pr {
                            d.extend_from_slice(&gd[i * c + col_off..i * c + col_off + pc]);
                        }
                        col_off += pc;
                    }
                    accumulate(grads, *p, like(*p, d)?);
                }
            }
            Op::Slice { x, rows, cols } => {
                let (_, c) = self.dims(*x)?;
                let w = cols.len();
                let d = slot(grads, *x, self.value(*x).shape());
                for (k, i) in rows.clone().enumerate() {
                    for (o, g) in d[i * c + cols.start..i * c + cols.end].iter_mut().zip(&gd[k * w..(k + 1) * w]) {
                        *o = *o + *g;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let (_, c) = self.dims(*x)?;
                let d = slot(grads, *x, self.value(*x).shape());
                for (k, i) in idx.iter().enumerate() {
                    for (o, g) in d[i * c..(i + 1) * c].iter_mut().zip(&gd[k * c..(k + 1) * c]) {
                        *o = *o + *g;
                    }
                }
            }
            Op::Gather { x, idx } => {
                let d = slot(grads, *x, self.value(*x).shape());
                for (k, i) in idx.iter().enumerate() {
                    d[*i] = d[*i] + gd[k];
                }
            }
            Op::Mask { x, mask } => {
                let d = gd.iter().zip(mask).map(|(g, m)| *g * *m).collect();
                accumulate(grads, *x, like(*x, d)?);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gd[0] / T::from_usize(n).unwrap();
                accumulate(grads, *x, like(*x, vec![v; n])?);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, like(*x, vec![gd[0]; n])?);
            }
            Op::Cosine { a, b, na, nb } => {
                let (r, c) = self.dims(*a)?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let mut da = Vec::with_capacity(r * c);
                let mut db = Vec::with_capacity(r * c);
                for i in 0..r {
                    let cos = y[i];
                    let (x, z) = (&va[i * c..(i + 1) * c], &vb[i * c..(i + 1) * c]);
                    let inv = T::one() / (na[i] * nb[i]);
                    for j in 0..c {
                        da.push(gd[i] * (z[j] * inv - cos * x[j] / (na[i] * na[i])));
                        db.push(gd[i] * (x[j] * inv - cos * z[j] / (nb[i] * nb[i])));
                    }
                }
                accumulate(grads, *a, like(*a, da)?);
                accumulate(grads, *b, like(*b, db)?);
            }
            Op::NormalizeRows { x, norms } => {
                let (r, c) = self.dims(*x)?;
                let mut d = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    d.extend(yr.iter().zip(gr).map(|(yv, gv)| (*gv - *yv * dot) / norms[i]));
                }
                accumulate(grads, *x, like(*x, d)?);
            }
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(a: T) -> T {
    if a >= T::zero() {
        T::one() / (T::one() + (-a).exp())
    } else {
        let e = a.exp();
        e / (T::one() + e)
    }
}

/// Gradient buffer of `v`, zero-initialized on first use; lets sparse
/// adjoints scatter into it without a full-size temporary.
fn slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

/// Result of a reverse sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape<T>, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
    }

    /// Gradients for vars returned by [`Tape::bind`], in parameter order.
    pub fn for_params(&self, tape: &Tape<T>, bound: &[Var]) -> Vec<Tensor<T>> {
        bound.iter().map(|v| self.wrt(tape, *v)).collect()
    }
}
