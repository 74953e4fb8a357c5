use std::collections::HashMap;

use super::{Scalar, Tensor};
use crate::error::{LsanError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    /// `[m,k] x [k,n]`
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `[m,k] x [n,k]^T`
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// Per batch block: `[t,k] x [s,k]^T`
    BatchMatMulNt { a: Var, b: Var, batch: usize, t: usize, s: usize, k: usize },
    /// Per batch block: `[t,s] x [s,n]`
    BatchMatMul { a: Var, b: Var, batch: usize, t: usize, s: usize, n: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var, cols: usize },
    ScaleRows { x: Var, w: Var, cols: usize },
    MaskRows { x: Var, keep: Vec<bool>, cols: usize },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    RowSum { x: Var, cols: usize },
    SumSquares { x: Var },
    Concat { parts: Vec<Var>, widths: Vec<usize>, rows: usize },
    SliceCols { x: Var, start: usize, end: usize, cols: usize },
    IndexSelect { table: Var, indices: Vec<usize>, width: usize },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    Silu { x: Var },
    Gelu { x: Var },
    DepthwiseConv { x: Var, kernel: Var, batch: usize, seq: usize, width: usize, taps: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    track: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
        }
    }

    /// A graph whose parameter leaves never require gradients.
    pub fn inference() -> Self {
        Graph {
            track: false,
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.track;
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf for a trainable tensor keyed by `key`; repeated calls reuse one node.
    pub fn param(&mut self, key: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(value.clone(), true);
        self.params.insert(key, v);
        v
    }

    /// Gradient of each registered parameter key after [`Graph::backward`].
    pub fn param_grad(&self, key: usize) -> Option<&[T]> {
        self.params.get(&key).and_then(|&v| self.grad(v))
    }

    pub fn param_var(&self, key: usize) -> Option<Var> {
        self.params.get(&key).copied()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
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

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- forward primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(LsanError::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let out = matmul_nn(self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a · bᵀ`, the row-vector form of applying a weight matrix.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(LsanError::shape("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T")));
        }
        let out = matmul_nt(self.data(a), self.data(b), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    /// Blockwise `a_b · b_bᵀ` where both operands stack `batch` blocks of rows.
    pub fn batch_matmul_nt(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ra, k) = self.dims(a);
        let (rb, k2) = self.dims(b);
        if batch == 0 || ra % batch != 0 || rb % batch != 0 || k != k2 {
            return Err(LsanError::shape(
                "batch_matmul_nt",
                format!("[{ra},{k}] x [{rb},{k2}]^T in {batch} blocks"),
            ));
        }
        let (t, s) = (ra / batch, rb / batch);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(batch * t * s);
        for blk in 0..batch {
            out.extend(matmul_nt(
                &ad[blk * t * k..(blk + 1) * t * k],
                &bd[blk * s * k..(blk + 1) * s * k],
                t,
                k,
                s,
            ));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::matrix(batch * t, s, out)?,
            Op::BatchMatMulNt { a, b, batch, t, s, k },
            rg,
        ))
    }

    /// Blockwise `a_b · b_b` with `a` of shape `[batch*t, s]` and `b` of `[batch*s, n]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let (ra, s) = self.dims(a);
        let (rb, n) = self.dims(b);
        if batch == 0 || ra % batch != 0 || rb != batch * s {
            return Err(LsanError::shape(
                "batch_matmul",
                format!("[{ra},{s}] x [{rb},{n}] in {batch} blocks"),
            ));
        }
        let t = ra / batch;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(batch * t * n);
        for blk in 0..batch {
            out.extend(matmul_nn(
                &ad[blk * t * s..(blk + 1) * t * s],
                &bd[blk * s * n..(blk + 1) * s * n],
                t,
                s,
                n,
            ));
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::matrix(batch * t, n, out)?,
            Op::BatchMatMul { a, b, batch, t, s, n },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    /// Adds a length-`C` bias to every row of an `[R, C]` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(bias).len() != cols {
            return Err(LsanError::shape(
                "add_row_bias",
                format!("bias of {} values for {cols} columns", self.value(bias).len()),
            ));
        }
        let bd = self.data(bias);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % cols])
            .collect();
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::AddRowBias { x, bias, cols },
            rg,
        ))
    }

    /// Multiplies row `r` of `x` by `w[r]`, with `w` of shape `[R, 1]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if self.value(w).len() != rows {
            return Err(LsanError::shape(
                "scale_rows",
                format!("{} weights for {rows} rows", self.value(w).len()),
            ));
        }
        let wd = self.data(w);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wd[i / cols])
            .collect();
        let rg = self.any_grad(&[x, w]);
        Ok(self.push(Tensor::matrix(rows, cols, out)?, Op::ScaleRows { x, w, cols }, rg))
    }

    /// Zeroes the rows whose `keep` flag is false.
    pub fn mask_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if keep.len() != rows {
            return Err(LsanError::shape(
                "mask_rows",
                format!("{} flags for {rows} rows", keep.len()),
            ));
        }
        let out: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| if keep[i / cols] { v } else { T::zero() })
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::matrix(rows, cols, out)?,
            Op::MaskRows { x, keep: keep.to_vec(), cols },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data: out }, Op::Scale { x, factor }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Sums each row of an `[R, C]` matrix into an `[R, 1]` column.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let out: Vec<T> = self.data(x).chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::matrix(rows, 1, out)?, Op::RowSum { x, cols }, rg))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().map(|&v| v * v).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares { x }, rg)
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| LsanError::contract("concat of zero tensors"))?;
        let rows = self.dims(*first).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(LsanError::shape("concat", format!("{r} rows vs {rows}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::Concat { parts: parts.to_vec(), widths, rows },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if start >= end || end > cols {
            return Err(LsanError::shape(
                "slice_cols",
                format!("[{start},{end}) of {cols} columns"),
            ));
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in self.data(x).chunks(cols) {
            out.extend_from_slice(&r[start..end]);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::matrix(rows, end - start, out)?,
            Op::SliceCols { x, start, end, cols },
            rg,
        ))
    }

    /// Gathers rows of `table` in the order given by `indices`.
    pub fn index_select(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, width) = self.dims(table);
        if indices.is_empty() {
            return Err(LsanError::contract("index_select with no indices"));
        }
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(LsanError::Index { index: i, limit: rows });
            }
            out.extend_from_slice(&self.data(table)[i * width..(i + 1) * width]);
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Tensor::matrix(indices.len(), width, out)?,
            Op::IndexSelect { table, indices: indices.to_vec(), width },
            rg,
        ))
    }

    /// Max-stabilised softmax along `axis`.
    ///
    /// `mask` marks entries that take part (`true`); it either covers the
    /// whole tensor or one slice along `axis`, broadcast to every slice.
    /// Masked entries get probability exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let shape = if shape.is_empty() { vec![1] } else { shape };
        if axis >= shape.len() {
            return Err(LsanError::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let total = outer * len * inner;
        if let Some(m) = mask {
            if m.len() != total && m.len() != len {
                return Err(LsanError::shape(
                    "softmax",
                    format!("mask of {} entries for {shape:?}", m.len()),
                ));
            }
        }
        let keep = |flat: usize, j: usize| match mask {
            None => true,
            Some(m) if m.len() == total => m[flat],
            Some(m) => m[j],
        };
        let xd = self.data(x);
        let mut out = vec![T::zero(); total];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                let mut any = false;
                for j in 0..len {
                    if keep(at(j), j) {
                        any = true;
                        max = max.max(xd[at(j)]);
                    }
                }
                if !any {
                    return Err(LsanError::DegenerateSlice { slice: o * inner + i });
                }
                let mut denom = T::zero();
                for j in 0..len {
                    if keep(at(j), j) {
                        let e = (xd[at(j)] - max).exp();
                        out[at(j)] = e;
                        denom = denom + e;
                    }
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / denom;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, outer, len, inner }, rg))
    }

    /// `x · sigmoid(x)`, elementwise.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.check_finite("silu", x)?;
        let out: Vec<T> = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Silu { x }, rg))
    }

    /// `x · Φ(x)` with the exact normal CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.check_finite("gelu", x)?;
        let out: Vec<T> = self.data(x).iter().map(|&v| v * normal_cdf(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Gelu { x }, rg))
    }

    /// Depthwise 1-D convolution with zero padding, applied independently to
    /// `batch` blocks of `seq` rows. Tap `j` of channel `d` reads row
    /// `i + j + 1 - ceil((L + 1) / 2)`.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, batch: usize) -> Result<Var> {
        let (rows, width) = self.dims(x);
        let (taps, kw) = self.dims(kernel);
        if batch == 0 || rows % batch != 0 || kw != width {
            return Err(LsanError::shape(
                "depthwise_conv",
                format!("input [{rows},{width}], kernel [{taps},{kw}], {batch} blocks"),
            ));
        }
        let seq = rows / batch;
        let centre = (taps + 2) / 2;
        let (xd, kd) = (self.data(x), self.data(kernel));
        let mut out = vec![T::zero(); rows * width];
        for b in 0..batch {
            for i in 0..seq {
                let orow = (b * seq + i) * width;
                for j in 0..taps {
                    let src = i as isize + j as isize + 1 - centre as isize;
                    if src < 0 || src >= seq as isize {
                        continue;
                    }
                    let irow = (b * seq + src as usize) * width;
                    let krow = j * width;
                    for d in 0..width {
                        out[orow + d] = out[orow + d] + kd[krow + d] * xd[irow + d];
                    }
                }
            }
        }
        let rg = self.any_grad(&[x, kernel]);
        Ok(self.push(
            Tensor::matrix(rows, width, out)?,
            Op::DepthwiseConv { x, kernel, batch, seq, width, taps },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(logits);
        if targets.len() != rows {
            return Err(LsanError::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let mut probs = Vec::with_capacity(rows * cols);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(LsanError::Index { index: t, limit: cols });
            }
            let row = &self.data(logits)[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let denom: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + denom.ln();
            total = total + (lse - row[t]);
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let loss = total / T::lit(rows as f64);
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(LsanError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if self.data(x).iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(LsanError::NumericDomain { op })
        }
    }

    // ---- reverse sweep ----

    /// Populates `grad` on every node that requires one, seeded with
    /// d(loss)/d(loss) = 1. Fan-out accumulates additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(LsanError::contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            self.nodes[idx].grad = Some(gy);
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.iter_mut().zip(g) {
                        *e = *e + x;
                    }
                }
                slot @ None => *slot = Some(g),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if rg(a) {
                    acc(a, matmul_nt(gy, self.data(b), m, n, k));
                }
                if rg(b) {
                    acc(b, matmul_tn(self.data(a), gy, m, k, n));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if rg(a) {
                    acc(a, matmul_nn(gy, self.data(b), m, n, k));
                }
                if rg(b) {
                    acc(b, matmul_tn(gy, self.data(a), m, n, k));
                }
            }
            &Op::BatchMatMulNt { a, b, batch, t, s, k } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if rg(a) {
                    let mut ga = Vec::with_capacity(batch * t * k);
                    for blk in 0..batch {
                        ga.extend(matmul_nn(
                            &gy[blk * t * s..(blk + 1) * t * s],
                            &bd[blk * s * k..(blk + 1) * s * k],
                            t,
                            s,
                            k,
                        ));
                    }
                    acc(a, ga);
                }
                if rg(b) {
                    let mut gb = Vec::with_capacity(batch * s * k);
                    for blk in 0..batch {
                        gb.extend(matmul_tn(
                            &gy[blk * t * s..(blk + 1) * t * s],
                            &ad[blk * t * k..(blk + 1) * t * k],
                            t,
                            s,
                            k,
                        ));
                    }
                    acc(b, gb);
                }
            }
            &Op::BatchMatMul { a, b, batch, t, s, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if rg(a) {
                    let mut ga = Vec::with_capacity(batch * t * s);
                    for blk in 0..batch {
                        ga.extend(matmul_nt(
                            &gy[blk * t * n..(blk + 1) * t * n],
                            &bd[blk * s * n..(blk + 1) * s * n],
                            t,
                            n,
                            s,
                        ));
                    }
                    acc(a, ga);
                }
                if rg(b) {
                    let mut gb = Vec::with_capacity(batch * s * n);
                    for blk in 0..batch {
                        gb.extend(matmul_tn(
                            &ad[blk * t * s..(blk + 1) * t * s],
                            &gy[blk * t * n..(blk + 1) * t * n],
                            t,
                            s,
                            n,
                        ));
                    }
                    acc(b, gb);
                }
            }
            &Op::Add { a, b } => {
                acc(a, gy.to_vec());
                acc(b, gy.to_vec());
            }
            &Op::Mul { a, b } => {
                if rg(a) {
                    acc(a, gy.iter().zip(self.data(b)).map(|(&g, &v)| g * v).collect());
                }
                if rg(b) {
                    acc(b, gy.iter().zip(self.data(a)).map(|(&g, &v)| g * v).collect());
                }
            }
            &Op::AddRowBias { x, bias, cols } => {
                acc(x, gy.to_vec());
                if rg(bias) {
                    let mut gb = vec![T::zero(); cols];
                    for (i, &g) in gy.iter().enumerate() {
                        gb[i % cols] = gb[i % cols] + g;
                    }
                    acc(bias, gb);
                }
            }
            &Op::ScaleRows { x, w, cols } => {
                let (xd, wd) = (self.data(x), self.data(w));
                if rg(x) {
                    acc(x, gy.iter().enumerate().map(|(i, &g)| g * wd[i / cols]).collect());
                }
                if rg(w) {
                    let gw = gy
                        .chunks(cols)
                        .zip(xd.chunks(cols))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(&g, &v)| g * v).sum())
                        .collect();
                    acc(w, gw);
                }
            }
            Op::MaskRows { x, keep, cols } => {
                let g = gy
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| if keep[i / cols] { g } else { T::zero() })
                    .collect();
                acc(*x, g);
            }
            &Op::Scale { x, factor } => acc(x, gy.iter().map(|&g| g * factor).collect()),
            &Op::Sum { x } => acc(x, vec![gy[0]; self.value(x).len()]),
            &Op::RowSum { x, cols } => {
                let g = (0..self.value(x).len()).map(|i| gy[i / cols]).collect();
                acc(x, g);
            }
            &Op::SumSquares { x } => {
                let two = T::lit(2.0);
                acc(x, self.data(x).iter().map(|&v| two * v * gy[0]).collect());
            }
            Op::Concat { parts, widths, rows } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if rg(p) {
                        let mut g = Vec::with_capacity(rows * w);
                        for r in 0..*rows {
                            g.extend_from_slice(&gy[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, g);
                    }
                    offset += w;
                }
            }
            &Op::SliceCols { x, start, end, cols } => {
                let width = end - start;
                let mut g = vec![T::zero(); self.value(x).len()];
                for (r, gr) in gy.chunks(width).enumerate() {
                    g[r * cols + start..r * cols + end].copy_from_slice(gr);
                }
                acc(x, g);
            }
            Op::IndexSelect { table, indices, width } => {
                let mut g = vec![T::zero(); self.value(*table).len()];
                for (r, &i) in indices.iter().enumerate() {
                    for d in 0..*width {
                        g[i * width + d] = g[i * width + d] + gy[r * width + d];
                    }
                }
                acc(*table, g);
            }
            &Op::Softmax { x, outer, len, inner } => {
                let mut g = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: T = (0..len).map(|j| gy[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            g[at(j)] = y[at(j)] * (gy[at(j)] - dot);
                        }
                    }
                }
                acc(x, g);
            }
            &Op::Silu { x } => {
                let g = self
                    .data(x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| {
                        let s = sigmoid(v);
                        g * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                acc(x, g);
            }
            &Op::Gelu { x } => {
                let g = self
                    .data(x)
                    .iter()
                    .zip(gy)
                    .map(|(&v, &g)| g * (normal_cdf(v) + v * normal_pdf(v)))
                    .collect();
                acc(x, g);
            }
            &Op::DepthwiseConv { x, kernel, batch, seq, width, taps } => {
                let centre = (taps + 2) / 2;
                let (xd, kd) = (self.data(x), self.data(kernel));
                let mut gx = vec![T::zero(); xd.len()];
                let mut gk = vec![T::zero(); kd.len()];
                for b in 0..batch {
                    for i in 0..seq {
                        let orow = (b * seq + i) * width;
                        for j in 0..taps {
                            let src = i as isize + j as isize + 1 - centre as isize;
                            if src < 0 || src >= seq as isize {
                                continue;
                            }
                            let irow = (b * seq + src as usize) * width;
                            let krow = j * width;
                            for d in 0..width {
                                gx[irow + d] = gx[irow + d] + kd[krow + d] * gy[orow + d];
                                gk[krow + d] = gk[krow + d] + xd[irow + d] * gy[orow + d];
                            }
                        }
                    }
                }
                acc(x, gx);
                acc(kernel, gk);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = probs.len() / targets.len();
                let scale = gy[0] / T::lit(targets.len() as f64);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * cols + t] = g[r * cols + t] - scale;
                }
                acc(*logits, g);
            }
        }
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn normal_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x / T::lit(std::f64::consts::SQRT_2)).erf())
}

fn normal_pdf<T: Scalar>(x: T) -> T {
    let inv_sqrt_2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    inv_sqrt_2pi * (-(x * x) / T::lit(2.0)).exp()
}

/// `[m,k] x [k,n]`
fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `[m,k] x [n,k]^T`
fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out.push(arow.iter().zip(brow).map(|(&x, &y)| x * y).sum());
        }
    }
    out
}

/// `[m,k]^T x [m,n]`, giving `[k,n]`.
fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}
