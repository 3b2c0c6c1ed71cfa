//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes in creation
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse. Gradients of leaves persist across `backward`
//! calls and accumulate until [`Graph::zero_grad`]; gradients of interior
//! nodes are scratch space and are dropped as soon as they are consumed.
//!
//! Parameters can be attached by reference ([`Graph::param`]) so a forward
//! pass never copies the weights it reads.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{axis_split, Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Large negative logit used for masked attention positions; `exp` of it
/// underflows to exactly zero in both precisions while staying finite.
pub const MASKED_LOGIT: f64 = -1.0e9;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add { a: usize, b: usize },
    AddRow { a: usize, row: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: T },
    Gelu { a: usize },
    Relu { a: usize },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, d: usize, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: usize, ids: Vec<usize>, width: usize },
    SliceCols { a: usize, start: usize, width: usize, cols: usize },
    Concat { parts: Vec<(usize, usize)>, outer: usize, inner: usize, total: usize },
    Mean { a: usize, outer: usize, len: usize, inner: usize },
    Max { a: usize, outer: usize, len: usize, inner: usize, argmax: Vec<usize> },
    Sum { a: usize },
    Reshape { a: usize },
    Cosine { a: usize, b: usize, dot: f64, na: f64, nb: f64 },
    CosineRows { a: usize, b: usize, d: usize, stats: Vec<(f64, f64, f64)> },
    Attention { q: usize, k: usize, v: usize, lens: Vec<usize>, heads: usize, scale: T, probs: Vec<T> },
    SegmentMean { a: usize, lens: Vec<usize>, d: usize },
    SegmentMax { a: usize, d: usize, argmax: Vec<usize> },
}

struct Node<'a, T: Clone> {
    shape: Vec<usize>,
    value: Cow<'a, [T]>,
    op: Op<T>,
    requires_grad: bool,
}

/// A computation graph over tensors of element type `T`.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [T]>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { shape, value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.push(shape, Cow::Owned(data), op, rg)
    }

    /// Adds an owned leaf.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, requires_grad)
    }

    /// Adds a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Adds a trainable leaf that borrows its data.
    pub fn param(&mut self, t: &'a Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, true)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].shape.clone(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn matrix_dims(&self, v: Var, op: &'static str, other: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::Shape { op, lhs: s.to_vec(), rhs: self.shape(other).to_vec() });
        }
        Ok((s[0], s[1]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        Ok(())
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape(a).len() {
            return Err(Error::Contract(format!("{op}: axis {axis} out of range for shape {:?}", self.shape(a))));
        }
        Ok(())
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul", b)?;
        let (k2, n) = self.matrix_dims(b, "matmul", a)?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::gemm_nn(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul { a: a.0, b: b.0, m, k, n }, &[a.0, b.0]))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_nt", b)?;
        let (n, k2) = self.matrix_dims(b, "matmul_nt", a)?;
        if k != k2 {
            return Err(Error::Shape { op: "matmul_nt", lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() });
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::gemm_nt(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMulNt { a: a.0, b: b.0, m, k, n }, &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.derived(self.shape(a).to_vec(), out, Op::Add { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Adds a vector of length `cols(a)` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&0);
        if self.shape(row) != [cols] {
            return Err(Error::Shape { op: "add_row", lhs: self.shape(a).to_vec(), rhs: self.shape(row).to_vec() });
        }
        let r = self.data(row);
        let out = self.data(a).chunks_exact(cols).flat_map(|c| c.iter().zip(r).map(|(&x, &y)| x + y)).collect();
        Ok(self.derived(self.shape(a).to_vec(), out, Op::AddRow { a: a.0, row: row.0 }, &[a.0, row.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.derived(self.shape(a).to_vec(), out, Op::Sub { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.derived(self.shape(a).to_vec(), out, Op::Mul { a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.data(a).iter().map(|&x| x * factor).collect();
        self.derived(self.shape(a).to_vec(), out, Op::Scale { a: a.0, factor }, &[a.0])
    }

    /// Exact GELU, `x·Φ(x)` with the Gaussian CDF written through `erf`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| gelu(x)).collect();
        self.derived(self.shape(a).to_vec(), out, Op::Gelu { a: a.0 }, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.data(a).iter().map(|&x| if x > T::ZERO { x } else { T::ZERO }).collect();
        self.derived(self.shape(a).to_vec(), out, Op::Relu { a: a.0 }, &[a.0])
    }

    /// Max-shifted softmax along `axis`; the normalizer is summed in `f64`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let x = self.data(a);
        let mut out = vec![T::ZERO; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut mx = x[at(0)];
                for j in 1..len {
                    if x[at(j)] > mx {
                        mx = x[at(j)];
                    }
                }
                let mut total = 0.0f64;
                for j in 0..len {
                    let e = (x[at(j)] - mx).exp();
                    out[at(j)] = e;
                    total += e.to_f64();
                }
                let inv = 1.0 / total;
                for j in 0..len {
                    out[at(j)] = T::from_f64(out[at(j)].to_f64() * inv);
                }
            }
        }
        Ok(self.derived(self.shape(a).to_vec(), out, Op::Softmax { a: a.0, outer, len, inner }, &[a.0]))
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::Shape { op: "layer_norm", lhs: self.shape(x).to_vec(), rhs: self.shape(gain).to_vec() });
        }
        if !(eps > 0.0) {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        let xs = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let rows = xs.len() / d;
        let mut out = vec![T::ZERO; xs.len()];
        let mut xhat = vec![T::ZERO; xs.len()];
        let mut rstd = vec![T::ZERO; rows];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = T::from_f64(rs);
            for j in 0..d {
                let h = T::from_f64((row[j].to_f64() - mean) * rs);
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let op = Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, d, xhat, rstd };
        Ok(self.derived(self.shape(x).to_vec(), out, op, &[x.0, gain.0, bias.0]))
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Contract(format!("gather_rows needs a matrix, got {s:?}")));
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("row index {bad} out of range for table with {rows} rows")));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&t[i * width..(i + 1) * width]);
        }
        let op = Op::Gather { table: table.0, ids: ids.to_vec(), width };
        Ok(self.derived(vec![ids.len(), width], out, op, &[table.0]))
    }

    /// Columns `start..start + width` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || width == 0 || start + width > s[1] {
            return Err(Error::Contract(format!("slice_cols {start}+{width} invalid for shape {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.data(a);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + width]);
        }
        Ok(self.derived(vec![rows, width], out, Op::SliceCols { a: a.0, start, width, cols }, &[a.0]))
    }

    /// Concatenates tensors that agree on every dimension except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape { op: "concat", lhs: base.clone(), rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let chunk = len * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let meta = parts.iter().map(|&p| (p.0, self.shape(p)[axis])).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.derived(shape, out, Op::Concat { parts: meta, outer, inner, total }, &ids))
    }

    /// Arithmetic mean along `axis` (the axis is removed), accumulated in `f64`.
    pub fn mean_along(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "mean_along")?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let x = self.data(a);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let s: f64 = (0..len).map(|j| x[o * len * inner + j * inner + i].to_f64()).sum();
                out[o * inner + i] = T::from_f64(s / len as f64);
            }
        }
        let shape = reduced_shape(self.shape(a), axis);
        Ok(self.derived(shape, out, Op::Mean { a: a.0, outer, len, inner }, &[a.0]))
    }

    /// Maximum along `axis`; the gradient flows to the first maximal element.
    pub fn max_along(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "max_along")?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let x = self.data(a);
        let mut out = vec![T::ZERO; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut best = 0;
                for j in 1..len {
                    if x[at(j)] > x[at(best)] {
                        best = j;
                    }
                }
                out[o * inner + i] = x[at(best)];
                argmax[o * inner + i] = best;
            }
        }
        let shape = reduced_shape(self.shape(a), axis);
        Ok(self.derived(shape, out, Op::Max { a: a.0, outer, len, inner, argmax }, &[a.0]))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().map(|v| v.to_f64()).sum();
        self.derived(vec![1], vec![T::from_f64(s)], Op::Sum { a: a.0 }, &[a.0])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() || shape.contains(&0) {
            return Err(Error::Shape { op: "reshape", lhs: self.shape(a).to_vec(), rhs: shape.to_vec() });
        }
        let out = self.data(a).to_vec();
        Ok(self.derived(shape.to_vec(), out, Op::Reshape { a: a.0 }, &[a.0]))
    }

    /// Cosine of the angle between two equally sized tensors viewed as vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine")?;
        let (x, y) = (self.data(a), self.data(b));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p.to_f64() * q.to_f64()).sum();
        let sa: f64 = x.iter().map(|p| p.to_f64().powi(2)).sum();
        let sb: f64 = y.iter().map(|q| q.to_f64().powi(2)).sum();
        if sa == 0.0 || sb == 0.0 {
            return Err(Error::Degenerate("cosine of a zero vector".into()));
        }
        // sqrt(sa * sb) rather than na * nb: identical inputs then give exactly 1.
        let c = (dot / (sa * sb).sqrt()).clamp(-1.0, 1.0);
        let (na, nb) = (sa.sqrt(), sb.sqrt());
        let op = Op::Cosine { a: a.0, b: b.0, dot, na, nb };
        Ok(self.derived(vec![1], vec![T::from_f64(c)], op, &[a.0, b.0]))
    }

    /// Row-wise cosine similarity of two `[n × d]` matrices, shape `[n]`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "cosine_rows")?;
        let (n, d) = self.matrix_dims(a, "cosine_rows", b)?;
        let (x, y) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(n);
        let mut stats = Vec::with_capacity(n);
        for r in 0..n {
            let (xr, yr) = (&x[r * d..(r + 1) * d], &y[r * d..(r + 1) * d]);
            let (c, dot, sa, sb) = cosine_parts(xr, yr)
                .ok_or_else(|| Error::Degenerate(format!("cosine of a zero vector in row {r}")))?;
            out.push(T::from_f64(c));
            stats.push((dot, sa.sqrt(), sb.sqrt()));
        }
        Ok(self.derived(vec![n], out, Op::CosineRows { a: a.0, b: b.0, d, stats }, &[a.0, b.0]))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    ///
    /// `q`, `k` and `v` are `[R × d]` with the rows of several sequences
    /// stacked; `lens` gives the sequence lengths (summing to `R`). Each
    /// sequence attends only to itself. Head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads` and writes its context to the same
    /// columns of the output. Keys whose `key_mask` entry is 0 get
    /// [`MASKED_LOGIT`] added to their scores.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lens: &[usize], heads: usize, key_mask: Option<&[u8]>) -> Result<Var> {
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        let (rows, d) = self.matrix_dims(q, "attention", k)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::Contract(format!("attention: width {d} not divisible into {heads} heads")));
        }
        if lens.iter().sum::<usize>() != rows || lens.contains(&0) {
            return Err(Error::Contract(format!("attention: lengths {lens:?} do not partition {rows} rows")));
        }
        if key_mask.is_some_and(|m| m.len() != rows) {
            return Err(Error::Contract("attention: key mask length differs from row count".into()));
        }
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let masked = T::from_f64(MASKED_LOGIT);
        let (qv, kv, vv) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![T::ZERO; rows * d];
        let mut probs = Vec::with_capacity(lens.iter().map(|n| n * n).sum::<usize>() * heads);
        let mut scores = Vec::new();
        let mut start = 0;
        for &n in lens {
            for h in 0..heads {
                let col = h * dh;
                for i in 0..n {
                    let qi = &qv[(start + i) * d + col..(start + i) * d + col + dh];
                    scores.clear();
                    for j in 0..n {
                        let mut s = kernels::dot(qi, &kv[(start + j) * d + col..(start + j) * d + col + dh]) * scale;
                        if key_mask.is_some_and(|m| m[start + j] == 0) {
                            s += masked;
                        }
                        scores.push(s);
                    }
                    let mut mx = scores[0];
                    for &s in &scores[1..] {
                        if s > mx {
                            mx = s;
                        }
                    }
                    let mut total = 0.0f64;
                    for s in scores.iter_mut() {
                        *s = (*s - mx).exp();
                        total += s.to_f64();
                    }
                    let inv = 1.0 / total;
                    let orow = &mut out[(start + i) * d + col..(start + i) * d + col + dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = T::from_f64(s.to_f64() * inv);
                        probs.push(p);
                        let vj = &vv[(start + j) * d + col..(start + j) * d + col + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
            start += n;
        }
        let op = Op::Attention { q: q.0, k: k.0, v: v.0, lens: lens.to_vec(), heads, scale, probs };
        Ok(self.derived(vec![rows, d], out, op, &[q.0, k.0, v.0]))
    }

    fn segments(&self, a: Var, lens: &[usize], op: &'static str) -> Result<usize> {
        let s = self.shape(a);
        if s.len() != 2 || lens.iter().sum::<usize>() != s[0] || lens.is_empty() || lens.contains(&0) {
            return Err(Error::Contract(format!("{op}: lengths {lens:?} do not partition shape {s:?}")));
        }
        Ok(s[1])
    }

    /// Mean of each run of rows given by `lens`, shape `[lens.len() × d]`.
    pub fn segment_mean(&mut self, a: Var, lens: &[usize]) -> Result<Var> {
        let d = self.segments(a, lens, "segment_mean")?;
        let x = self.data(a);
        let mut out = Vec::with_capacity(lens.len() * d);
        let mut start = 0;
        for &n in lens {
            for c in 0..d {
                let s: f64 = (start..start + n).map(|r| x[r * d + c].to_f64()).sum();
                out.push(T::from_f64(s / n as f64));
            }
            start += n;
        }
        Ok(self.derived(vec![lens.len(), d], out, Op::SegmentMean { a: a.0, lens: lens.to_vec(), d }, &[a.0]))
    }

    /// Column-wise maximum of each run of rows; ties go to the earliest row.
    pub fn segment_max(&mut self, a: Var, lens: &[usize]) -> Result<Var> {
        let d = self.segments(a, lens, "segment_max")?;
        let x = self.data(a);
        let mut out = Vec::with_capacity(lens.len() * d);
        let mut argmax = Vec::with_capacity(lens.len() * d);
        let mut start = 0;
        for &n in lens {
            for c in 0..d {
                let mut best = start;
                for r in start + 1..start + n {
                    if x[r * d + c] > x[best * d + c] {
                        best = r;
                    }
                }
                out.push(x[best * d + c]);
                argmax.push(best);
            }
            start += n;
        }
        let op = Op::SegmentMax { a: a.0, d, argmax };
        Ok(self.derived(vec![lens.len(), d], out, op, &[a.0]))
    }

    /// Back-propagates from a one-element `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) {
                *g = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let seed = vec![T::ONE];
        if matches!(self.nodes[loss.0].op, Op::Leaf) {
            accumulate(&mut self.grads, loss.0, &seed);
            return Ok(());
        }
        self.grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.backprop_node(idx, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, idx: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |i: usize| -> &[T] { &nodes[i].value };
        let wants = |i: usize| nodes[i].requires_grad;
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    let mut ga = vec![T::ZERO; m * k];
                    kernels::gemm_nt(g, val(b), &mut ga, m, n, k);
                    accumulate(grads, a, &ga);
                }
                if wants(b) {
                    let mut gb = vec![T::ZERO; k * n];
                    kernels::gemm_tn(val(a), g, &mut gb, m, k, n);
                    accumulate(grads, b, &gb);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if wants(a) {
                    let mut ga = vec![T::ZERO; m * k];
                    kernels::gemm_nn(g, val(b), &mut ga, m, n, k);
                    accumulate(grads, a, &ga);
                }
                if wants(b) {
                    let mut gb = vec![T::ZERO; n * k];
                    kernels::gemm_tn(g, val(a), &mut gb, m, n, k);
                    accumulate(grads, b, &gb);
                }
            }
            &Op::Add { a, b } => {
                if wants(a) {
                    accumulate(grads, a, g);
                }
                if wants(b) {
                    accumulate(grads, b, g);
                }
            }
            &Op::AddRow { a, row } => {
                if wants(a) {
                    accumulate(grads, a, g);
                }
                if wants(row) {
                    let cols = nodes[row].value.len();
                    let mut gr = vec![0.0f64; cols];
                    for chunk in g.chunks_exact(cols) {
                        for (acc, &v) in gr.iter_mut().zip(chunk) {
                            *acc += v.to_f64();
                        }
                    }
                    let gr: Vec<T> = gr.into_iter().map(T::from_f64).collect();
                    accumulate(grads, row, &gr);
                }
            }
            &Op::Sub { a, b } => {
                if wants(a) {
                    accumulate(grads, a, g);
                }
                if wants(b) {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    accumulate(grads, b, &neg);
                }
            }
            &Op::Mul { a, b } => {
                if wants(a) {
                    let ga: Vec<T> = g.iter().zip(val(b)).map(|(&d, &y)| d * y).collect();
                    accumulate(grads, a, &ga);
                }
                if wants(b) {
                    let gb: Vec<T> = g.iter().zip(val(a)).map(|(&d, &x)| d * x).collect();
                    accumulate(grads, b, &gb);
                }
            }
            &Op::Scale { a, factor } => {
                let ga: Vec<T> = g.iter().map(|&d| d * factor).collect();
                accumulate(grads, a, &ga);
            }
            &Op::Gelu { a } => {
                let ga: Vec<T> = g.iter().zip(val(a)).map(|(&d, &x)| d * gelu_grad(x)).collect();
                accumulate(grads, a, &ga);
            }
            &Op::Relu { a } => {
                let ga: Vec<T> = g.iter().zip(val(a)).map(|(&d, &x)| if x > T::ZERO { d } else { T::ZERO }).collect();
                accumulate(grads, a, &ga);
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = &nodes[idx].value;
                let mut ga = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)].to_f64() * y[at(j)].to_f64()).sum();
                        let dot = T::from_f64(dot);
                        for j in 0..len {
                            ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                accumulate(grads, a, &ga);
            }
            Op::LayerNorm { x, gain, bias, d, xhat, rstd } => {
                let (x, gain, bias, d) = (*x, *gain, *bias, *d);
                let gv = val(gain);
                let rows = g.len() / d;
                if wants(gain) || wants(bias) {
                    let mut gg = vec![0.0f64; d];
                    let mut gbias = vec![0.0f64; d];
                    for r in 0..rows {
                        for j in 0..d {
                            let dy = g[r * d + j].to_f64();
                            gg[j] += dy * xhat[r * d + j].to_f64();
                            gbias[j] += dy;
                        }
                    }
                    if wants(gain) {
                        let gg: Vec<T> = gg.into_iter().map(T::from_f64).collect();
                        accumulate(grads, gain, &gg);
                    }
                    if wants(bias) {
                        let gbias: Vec<T> = gbias.into_iter().map(T::from_f64).collect();
                        accumulate(grads, bias, &gbias);
                    }
                }
                if wants(x) {
                    let mut gx = vec![T::ZERO; g.len()];
                    for r in 0..rows {
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for j in 0..d {
                            let dh = g[r * d + j].to_f64() * gv[j].to_f64();
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + j].to_f64();
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        let rs = rstd[r].to_f64();
                        for j in 0..d {
                            let dh = g[r * d + j].to_f64() * gv[j].to_f64();
                            let h = xhat[r * d + j].to_f64();
                            gx[r * d + j] = T::from_f64(rs * (dh - mean_dh - h * mean_dh_h));
                        }
                    }
                    accumulate(grads, x, &gx);
                }
            }
            Op::Gather { table, ids, width } => {
                let (table, width) = (*table, *width);
                let slot = grads[table].get_or_insert_with(|| vec![T::ZERO; nodes[table].value.len()]);
                for (r, &i) in ids.iter().enumerate() {
                    for (dst, &src) in slot[i * width..(i + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *dst += src;
                    }
                }
            }
            &Op::SliceCols { a, start, width, cols } => {
                let slot = grads[a].get_or_insert_with(|| vec![T::ZERO; nodes[a].value.len()]);
                for (r, chunk) in g.chunks_exact(width).enumerate() {
                    for (dst, &src) in slot[r * cols + start..r * cols + start + width].iter_mut().zip(chunk) {
                        *dst += src;
                    }
                }
            }
            Op::Concat { parts, outer, inner, total } => {
                let (outer, inner, total) = (*outer, *inner, *total);
                let mut offset = 0;
                for &(p, len) in parts {
                    if wants(p) {
                        let slot = grads[p].get_or_insert_with(|| vec![T::ZERO; nodes[p].value.len()]);
                        for o in 0..outer {
                            let src = &g[o * total * inner + offset * inner..o * total * inner + (offset + len) * inner];
                            for (dst, &s) in slot[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *dst += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            &Op::Mean { a, outer, len, inner } => {
                let scale = T::from_f64(1.0 / len as f64);
                let mut ga = vec![T::ZERO; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            ga[o * len * inner + j * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                accumulate(grads, a, &ga);
            }
            Op::Max { a, outer, len, inner, argmax } => {
                let (a, len, inner) = (*a, *len, *inner);
                let slot = grads[a].get_or_insert_with(|| vec![T::ZERO; nodes[a].value.len()]);
                for o in 0..*outer {
                    for i in 0..inner {
                        let j = argmax[o * inner + i];
                        slot[o * len * inner + j * inner + i] += g[o * inner + i];
                    }
                }
            }
            &Op::Sum { a } => {
                let ga = vec![g[0]; nodes[a].value.len()];
                accumulate(grads, a, &ga);
            }
            &Op::Reshape { a } => accumulate(grads, a, g),
            &Op::Cosine { a, b, dot, na, nb } => {
                let c = dot / (na * nb);
                let up = g[0].to_f64();
                let (x, y) = (val(a), val(b));
                if wants(a) {
                    let ga: Vec<T> = x
                        .iter()
                        .zip(y)
                        .map(|(p, q)| T::from_f64(up * (q.to_f64() / (na * nb) - c * p.to_f64() / (na * na))))
                        .collect();
                    accumulate(grads, a, &ga);
                }
                if wants(b) {
                    let gb: Vec<T> = x
                        .iter()
                        .zip(y)
                        .map(|(p, q)| T::from_f64(up * (p.to_f64() / (na * nb) - c * q.to_f64() / (nb * nb))))
                        .collect();
                    accumulate(grads, b, &gb);
                }
            }
            Op::CosineRows { a, b, d, stats } => {
                let (a, b, d) = (*a, *b, *d);
                let (x, y) = (val(a), val(b));
                let mut ga = vec![T::ZERO; x.len()];
                let mut gb = vec![T::ZERO; y.len()];
                for (r, &(dot, na, nb)) in stats.iter().enumerate() {
                    let c = dot / (na * nb);
                    let up = g[r].to_f64();
                    for j in r * d..(r + 1) * d {
                        let (p, q) = (x[j].to_f64(), y[j].to_f64());
                        ga[j] = T::from_f64(up * (q / (na * nb) - c * p / (na * na)));
                        gb[j] = T::from_f64(up * (p / (na * nb) - c * q / (nb * nb)));
                    }
                }
                if wants(a) {
                    accumulate(grads, a, &ga);
                }
                if wants(b) {
                    accumulate(grads, b, &gb);
                }
            }
            Op::Attention { q, k, v, lens, heads, scale, probs } => {
                let (q, k, v, heads, scale) = (*q, *k, *v, *heads, *scale);
                let (qv, kv, vv) = (val(q), val(k), val(v));
                let d = nodes[q].shape[1];
                let dh = d / heads;
                let mut gq = vec![T::ZERO; qv.len()];
                let mut gk = vec![T::ZERO; kv.len()];
                let mut gv = vec![T::ZERO; vv.len()];
                let mut ds = Vec::new();
                let mut start = 0;
                let mut pi = 0;
                for &n in lens {
                    for h in 0..heads {
                        let col = h * dh;
                        let row = |r: usize| (start + r) * d + col..(start + r) * d + col + dh;
                        for i in 0..n {
                            let p = &probs[pi + i * n..pi + (i + 1) * n];
                            let gi = &g[row(i)];
                            // dP_ij = dO_i · V_j, then the softmax Jacobian.
                            ds.clear();
                            let mut inner = 0.0f64;
                            for (j, &pj) in p.iter().enumerate() {
                                let dp = kernels::dot(gi, &vv[row(j)]);
                                inner += dp.to_f64() * pj.to_f64();
                                ds.push(dp);
                            }
                            let inner = T::from_f64(inner);
                            for (j, &pj) in p.iter().enumerate() {
                                let dsij = pj * (ds[j] - inner) * scale;
                                for (dst, &src) in gv[row(j)].iter_mut().zip(gi) {
                                    *dst += pj * src;
                                }
                                for (dst, &src) in gq[row(i)].iter_mut().zip(&kv[row(j)]) {
                                    *dst += dsij * src;
                                }
                                for (dst, &src) in gk[row(j)].iter_mut().zip(&qv[row(i)]) {
                                    *dst += dsij * src;
                                }
                            }
                        }
                        pi += n * n;
                    }
                    start += n;
                }
                for (i, gi) in [(q, gq), (k, gk), (v, gv)] {
                    if wants(i) {
                        accumulate(grads, i, &gi);
                    }
                }
            }
            Op::SegmentMean { a, lens, d } => {
                let (a, d) = (*a, *d);
                let mut ga = vec![T::ZERO; nodes[a].value.len()];
                let mut start = 0;
                for (s, &n) in lens.iter().enumerate() {
                    let inv = T::from_f64(1.0 / n as f64);
                    for r in start..start + n {
                        for c in 0..d {
                            ga[r * d + c] = g[s * d + c] * inv;
                        }
                    }
                    start += n;
                }
                accumulate(grads, a, &ga);
            }
            Op::SegmentMax { a, d, argmax } => {
                let (a, d) = (*a, *d);
                let slot = grads[a].get_or_insert_with(|| vec![T::ZERO; nodes[a].value.len()]);
                for (i, &r) in argmax.iter().enumerate() {
                    slot[r * d + i % d] += g[i];
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    match &mut grads[i] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g.to_vec()),
    }
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    x * half * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::from_f64(0.5) * (T::ONE + (x * T::from_f64(FRAC_1_SQRT_2)).erf());
    let pdf = T::from_f64(FRAC_1_SQRT_2PI) * (-(x * x) * T::from_f64(0.5)).exp();
    cdf + x * pdf
}

/// Dense matrix kernels. All accumulate into `c`; loop orders keep the
/// innermost loop contiguous so it vectorizes, and every reduction runs in a
/// fixed order, so results are bitwise reproducible.
/// `(cosine, dot, |x|², |y|²)` with `f64` sums; `None` if either vector is zero.
pub(crate) fn cosine_parts<T: Real>(x: &[T], y: &[T]) -> Option<(f64, f64, f64, f64)> {
    let dot: f64 = x.iter().zip(y).map(|(p, q)| p.to_f64() * q.to_f64()).sum();
    let sa: f64 = x.iter().map(|p| p.to_f64().powi(2)).sum();
    let sb: f64 = y.iter().map(|q| q.to_f64().powi(2)).sum();
    if sa == 0.0 || sb == 0.0 {
        return None;
    }
    Some(((dot / (sa * sb).sqrt()).clamp(-1.0, 1.0), dot, sa, sb))
}

pub(crate) mod kernels {
    use crate::tensor::Real;

    /// `c[m×n] += a[m×k] · b[k×n]`
    pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let crow = &mut c[i * n..(i + 1) * n];
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// `c[k×n] += a[m×k]ᵀ · b[m×n]`
    pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let crow = &mut c[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }

    /// `c[m×n] += a[m×k] · b[n×k]ᵀ`
    pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    }

    #[inline]
    pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
        const LANES: usize = 16;
        let mut acc = [T::ZERO; LANES];
        let xc = x.chunks_exact(LANES);
        let yc = y.chunks_exact(LANES);
        let (xr, yr) = (xc.remainder(), yc.remainder());
        for (xs, ys) in xc.zip(yc) {
            for l in 0..LANES {
                acc[l] += xs[l] * ys[l];
            }
        }
        let mut s = T::ZERO;
        for v in acc {
            s += v;
        }
        for (&p, &q) in xr.iter().zip(yr) {
            s += p * q;
        }
        s
    }
}
