//! Tape-recorded dense-tensor arithmetic with reverse-mode gradients.
//!
//! A [`Tape`] owns every tensor created during one forward pass, in
//! creation order. Builders evaluate eagerly: each call computes the
//! node's value immediately and records the operation, so inputs always
//! precede their consumers on the tape. [`Tape::backward`] walks the
//! record once in reverse, accumulating `d root / d node` into each
//! node's `grad` slot. Node values are never mutated after creation;
//! grads are only written during backward (and by [`Tape::zero_grads`]).
//!
//! Repeated `backward` calls without `zero_grads` accumulate, which is
//! what gradient accumulation across micro-batch items relies on.
//!
//! A tape is single-threaded; distinct tapes share nothing and may be
//! used from different threads freely.

use crate::kernels::{self, gemm, Matrix, Trans};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("{op} expects a scalar (1x1) node, got {rows}x{cols}")]
    NonScalar { op: &'static str, rows: usize, cols: usize },
    #[error("invalid temperature {0}: must be > 0")]
    InvalidTemperature(f64),
    #[error("invalid input in {op}: non-finite value at flat index {index}")]
    NonFiniteInput { op: &'static str, index: usize },
    #[error("index {index} out of bounds for {what} of size {size}")]
    IndexOutOfBounds { what: &'static str, index: usize, size: usize },
    #[error("mask entries must be 0 or 1, found {0}")]
    InvalidMask(f64),
    #[error("clip bounds inverted: lo={lo} > hi={hi}")]
    InvalidClipBounds { lo: f64, hi: f64 },
    #[error("{op} requires at least one input")]
    EmptyInput { op: &'static str },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a @ b`
    MatMul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Elementwise product.
    Mul { a: NodeId, b: NodeId },
    /// `c * x` for a compile-time constant scalar.
    Scale { x: NodeId, c: f64 },
    /// `x + data` for a constant tensor (no gradient into the constant).
    AddConst { x: NodeId },
    /// `x * data` elementwise for a constant tensor.
    MulConst { x: NodeId, data: Vec<f64> },
    /// `x @ w + b`, `b` broadcast over rows.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Gelu { x: NodeId },
    SoftmaxRows { x: NodeId, temperature: f64 },
    Log { x: NodeId },
    Exp { x: NodeId },
    Clip { x: NodeId, lo: f64, hi: f64 },
    /// Elementwise minimum; ties route gradient to `a`.
    Min { a: NodeId, b: NodeId },
    SumAll { x: NodeId },
    MeanAll { x: NodeId },
    /// Row gather: `out[r, :] = table[ids[r], :]`.
    GatherRows { table: NodeId, ids: Vec<usize> },
    /// Per-row column pick: `out[r, 0] = x[r, ids[r]]`.
    SelectCols { x: NodeId, ids: Vec<usize> },
    SliceCols { x: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    LayerNormRows { x: NodeId, gain: NodeId, bias: NodeId, mean: Vec<f64>, rstd: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    is_param: bool,
}

/// Topologically ordered record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Matrix, op: Op, is_param: bool) -> NodeId {
        let grad = Matrix::zeros(value.rows, value.cols);
        self.nodes.push(Node { value, grad, op, is_param });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; receives a grad slot but is not reported as a
    /// parameter.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; its gradient is what callers harvest.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    pub fn is_param(&self, id: NodeId) -> bool {
        self.nodes[id.0].is_param
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad.data.fill(0.0);
        }
    }

    fn shape_err(
        op: &'static str,
        l: (usize, usize),
        r: (usize, usize),
    ) -> GraphError {
        GraphError::ShapeMismatch {
            op,
            left_rows: l.0,
            left_cols: l.1,
            right_rows: r.0,
            right_cols: r.1,
        }
    }

    // ---- builders -----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(Self::shape_err("matmul", (ar, ac), (br, bc)));
        }
        let v = kernels::matmul(self.value(a), self.value(b));
        Ok(self.push(v, Op::MatMul { a, b }, false))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).transposed();
        self.push(v, Op::Transpose { x }, false)
    }

    fn elementwise2(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), GraphError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(Self::shape_err(op_name, (ar, ac), (br, bc)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise2("add", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x += y;
        }
        Ok(self.push(v, Op::Add { a, b }, false))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise2("sub", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x -= y;
        }
        Ok(self.push(v, Op::Sub { a, b }, false))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise2("mul", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            *x *= y;
        }
        Ok(self.push(v, Op::Mul { a, b }, false))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e *= c;
        }
        self.push(v, Op::Scale { x, c }, false)
    }

    /// Adds a constant tensor (same shape). Gradient passes through
    /// unchanged; nothing flows into the constant.
    pub fn add_const(&mut self, x: NodeId, data: &[f64]) -> Result<NodeId, GraphError> {
        let (r, c) = self.value(x).shape();
        if data.len() != r * c {
            return Err(Self::shape_err("add_const", (r, c), (data.len(), 1)));
        }
        let mut v = self.value(x).clone();
        for (e, d) in v.data.iter_mut().zip(data) {
            *e += d;
        }
        Ok(self.push(v, Op::AddConst { x }, false))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: NodeId, data: &[f64]) -> Result<NodeId, GraphError> {
        let (r, c) = self.value(x).shape();
        if data.len() != r * c {
            return Err(Self::shape_err("mul_const", (r, c), (data.len(), 1)));
        }
        let mut v = self.value(x).clone();
        for (e, d) in v.data.iter_mut().zip(data) {
            *e *= d;
        }
        Ok(self.push(v, Op::MulConst { x, data: data.to_vec() }, false))
    }

    /// Select-by-mask: keeps entries where `mask` is 1, zeroes the rest.
    /// The gradient flows only through selected entries; masked entries
    /// receive exactly zero. Mask entries must be exactly 0 or 1.
    pub fn select_by_mask(&mut self, x: NodeId, mask: &[f64]) -> Result<NodeId, GraphError> {
        if let Some(&bad) = mask.iter().find(|&&m| m != 0.0 && m != 1.0) {
            return Err(GraphError::InvalidMask(bad));
        }
        self.mul_const(x, mask)
    }

    /// `x @ w + b` with `b` a `1 x n` row broadcast over rows of the
    /// product.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        let (xr, xc) = self.value(x).shape();
        let (wr, wc) = self.value(w).shape();
        let (br, bc) = self.value(b).shape();
        if xc != wr {
            return Err(Self::shape_err("affine", (xr, xc), (wr, wc)));
        }
        if (br, bc) != (1, wc) {
            return Err(Self::shape_err("affine bias", (1, wc), (br, bc)));
        }
        let mut v = kernels::matmul(self.value(x), self.value(w));
        let bias = &self.nodes[b.0].value;
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += bias.data[c];
            }
        }
        Ok(self.push(v, Op::Affine { x, w, b }, false))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = kernels::gelu(*e);
        }
        self.push(v, Op::Gelu { x }, false)
    }

    /// Row-wise temperature softmax, max-subtracted. Differentiable
    /// w.r.t. the logits; the temperature is a constant.
    pub fn softmax_rows(&mut self, x: NodeId, temperature: f64) -> Result<NodeId, GraphError> {
        if !(temperature > 0.0) {
            return Err(GraphError::InvalidTemperature(temperature));
        }
        if let Some(i) = self.value(x).data.iter().position(|v| !v.is_finite()) {
            return Err(GraphError::NonFiniteInput { op: "softmax_rows", index: i });
        }
        let v = kernels::softmax_rows(self.value(x), temperature);
        Ok(self.push(v, Op::SoftmaxRows { x, temperature }, false))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = e.ln();
        }
        self.push(v, Op::Log { x }, false)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = e.exp();
        }
        self.push(v, Op::Exp { x }, false)
    }

    /// Elementwise clamp to `[lo, hi]`. Gradient passes only strictly
    /// inside the interval.
    pub fn clip(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, GraphError> {
        if lo > hi {
            return Err(GraphError::InvalidClipBounds { lo, hi });
        }
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e = e.clamp(lo, hi);
        }
        Ok(self.push(v, Op::Clip { x, lo, hi }, false))
    }

    /// Elementwise minimum of two nodes; on ties the gradient routes to
    /// the first argument.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise2("min", a, b)?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data.iter_mut().zip(&self.value(b).data) {
            if *y < *x {
                *x = *y;
            }
        }
        Ok(self.push(v, Op::Min { a, b }, false))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data.iter().sum();
        self.push(Matrix::scalar(s), Op::SumAll { x }, false)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data.iter().sum();
        self.push(Matrix::scalar(s / n), Op::MeanAll { x }, false)
    }

    /// Embedding-style row gather. Backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, GraphError> {
        let t = self.value(table);
        let (tr, tc) = t.shape();
        for &id in ids {
            if id >= tr {
                return Err(GraphError::IndexOutOfBounds { what: "gather_rows row", index: id, size: tr });
            }
        }
        let mut v = Matrix::zeros(ids.len(), tc);
        for (r, &id) in ids.iter().enumerate() {
            let src = self.value(table).row(id).to_vec();
            v.row_mut(r).copy_from_slice(&src);
        }
        Ok(self.push(v, Op::GatherRows { table, ids: ids.to_vec() }, false))
    }

    /// Picks one column per row: `out[r, 0] = x[r, ids[r]]`.
    pub fn select_cols(&mut self, x: NodeId, ids: &[usize]) -> Result<NodeId, GraphError> {
        let (r, c) = self.value(x).shape();
        if ids.len() != r {
            return Err(Self::shape_err("select_cols", (r, c), (ids.len(), 1)));
        }
        for &id in ids {
            if id >= c {
                return Err(GraphError::IndexOutOfBounds { what: "select_cols column", index: id, size: c });
            }
        }
        let mut v = Matrix::zeros(r, 1);
        for (row, &id) in ids.iter().enumerate() {
            v.data[row] = self.value(x).at(row, id);
        }
        Ok(self.push(v, Op::SelectCols { x, ids: ids.to_vec() }, false))
    }

    /// Contiguous column slice `x[:, start..start+len]`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, GraphError> {
        let (r, c) = self.value(x).shape();
        if start + len > c {
            return Err(GraphError::IndexOutOfBounds { what: "slice_cols range end", index: start + len, size: c });
        }
        let mut v = Matrix::zeros(r, len);
        for row in 0..r {
            let src = &self.value(x).row(row)[start..start + len];
            let src = src.to_vec();
            v.row_mut(row).copy_from_slice(&src);
        }
        Ok(self.push(v, Op::SliceCols { x, start }, false))
    }

    /// Concatenates nodes along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::EmptyInput { op: "concat_cols" });
        }
        let rows = self.value(parts[0]).rows;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).shape();
            if pr != rows {
                return Err(Self::shape_err("concat_cols", (rows, cols), (pr, pc)));
            }
            cols += pc;
        }
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pc = self.value(p).cols;
            for r in 0..rows {
                let src = self.value(p).row(r).to_vec();
                v.row_mut(r)[off..off + pc].copy_from_slice(&src);
            }
            off += pc;
        }
        Ok(self.push(v, Op::ConcatCols { parts: parts.to_vec() }, false))
    }

    /// Row-wise layer norm with learned `gain` and `bias` (both `1 x d`).
    pub fn layer_norm_rows(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, GraphError> {
        let (_, d) = self.value(x).shape();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let (gr, gc) = self.value(id).shape();
            if (gr, gc) != (1, d) {
                let _ = name;
                return Err(Self::shape_err("layer_norm_rows", (1, d), (gr, gc)));
            }
        }
        let g = self.value(gain).data.clone();
        let b = self.value(bias).data.clone();
        let (v, mean, rstd) = kernels::layer_norm_rows(self.value(x), &g, &b);
        Ok(self.push(v, Op::LayerNormRows { x, gain, bias, mean, rstd }, false))
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar root. Each node is visited once,
    /// in reverse creation order; gradients accumulate into `grad`
    /// slots (call [`Tape::zero_grads`] to reset between uses).
    pub fn backward(&mut self, root: NodeId) -> Result<(), GraphError> {
        let (r, c) = self.value(root).shape();
        if (r, c) != (1, 1) {
            return Err(GraphError::NonScalar { op: "backward", rows: r, cols: c });
        }
        self.nodes[root.0].grad.data[0] += 1.0;
        for i in (0..=root.0).rev() {
            let op = self.nodes[i].op.clone();
            let dy = self.nodes[i].grad.clone();
            if dy.data.iter().all(|&v| v == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    // dA += dC @ B^T ; dB += A^T @ dC
                    let bval = self.nodes[b.0].value.clone();
                    let aval = self.nodes[a.0].value.clone();
                    gemm(1.0, &dy, Trans::No, &bval, Trans::Yes, 1.0, &mut self.nodes[a.0].grad);
                    gemm(1.0, &aval, Trans::Yes, &dy, Trans::No, 1.0, &mut self.nodes[b.0].grad);
                }
                Op::Transpose { x } => {
                    let dt = dy.transposed();
                    for (g, d) in self.nodes[x.0].grad.data.iter_mut().zip(&dt.data) {
                        *g += d;
                    }
                }
                Op::Add { a, b } => {
                    for (g, d) in self.nodes[a.0].grad.data.iter_mut().zip(&dy.data) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.0].grad.data.iter_mut().zip(&dy.data) {
                        *g += d;
                    }
                }
                Op::Sub { a, b } => {
                    for (g, d) in self.nodes[a.0].grad.data.iter_mut().zip(&dy.data) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.0].grad.data.iter_mut().zip(&dy.data) {
                        *g -= d;
                    }
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].value.data.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    for ((g, d), y) in self.nodes[a.0].grad.data.iter_mut().zip(&dy.data).zip(&bv) {
                        *g += d * y;
                    }
                    for ((g, d), x) in self.nodes[b.0].grad.data.iter_mut().zip(&dy.data).zip(&av) {
                        *g += d * x;
                    }
                }
                Op::Scale { x, c } => {
                    for (g, d) in self.nodes[x.0].grad.data.iter_mut().zip(&dy.data) {
                        *g += c * d;
                    }
                }
                Op::AddConst { x } => {
                    for (g, d) in self.nodes[x.0].grad.data.iter_mut().zip(&dy.data) {
                        *g += d;
                    }
                }
                Op::MulConst { x, data } => {
                    for ((g, d), m) in self.nodes[x.0].grad.data.iter_mut().zip(&dy.data).zip(&data) {
                        *g += d * m;
                    }
                }
                Op::Affine { x, w, b } => {
                    let wval = self.nodes[w.0].value.clone();
                    let xval = self.nodes[x.0].value.clone();
                    gemm(1.0, &dy, Trans::No, &wval, Trans::Yes, 1.0, &mut self.nodes[x.0].grad);
                    gemm(1.0, &xval, Trans::Yes, &dy, Trans::No, 1.0, &mut self.nodes[w.0].grad);
                    let bg = &mut self.nodes[b.0].grad;
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            bg.data[c] += dy.at(r, c);
                        }
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.nodes[x.0].value.data.clone();
                    for ((g, d), xi) in self.nodes[x.0].grad.data.iter_mut().zip(&dy.data).zip(&xv) {
                        *g += d * kernels::gelu_grad(*xi);
                    }
                }
                Op::SoftmaxRows { x, temperature } => {
                    let p = self.nodes[i].value.clone();
                    let xg = &mut self.nodes[x.0].grad;
                    for r in 0..p.rows {
                        let prow = p.row(r);
                        let dyrow = dy.row(r);
                        let s: f64 = prow.iter().zip(dyrow).map(|(pi, di)| pi * di).sum();
                        let grow = xg.row_mut(r);
                        for j in 0..prow.len() {
                            grow[j] += prow[j] * (dyrow[j] - s) / temperature;
                        }
                    }
                }
                Op::Log { x } => {
                    let xv = self.nodes[x.0].value.data.clone();
                    for ((g, d), xi) in self.nodes[x.0].grad.data.iter_mut().zip(&dy.data).zip(&xv) {
                        *g += d / xi;
                    }
                }
                Op::Exp { x } => {
                    let yv = self.nodes[i].value.data.clone();
                    for ((g, d), yi) in self.nodes[x.0].grad.data.iter_mut().zip(&dy.data).zip(&yv) {
                        *g += d * yi;
                    }
                }
                Op::Clip { x, lo, hi } => {
                    let xv = self.nodes[x.0].value.data.clone();
                    for ((g, d), xi) in self.nodes[x.0].grad.data.iter_mut().zip(&dy.data).zip(&xv) {
                        if *xi > lo && *xi < hi {
                            *g += d;
                        }
                    }
                }
                Op::Min { a, b } => {
                    let av = self.nodes[a.0].value.data.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    for (idx, d) in dy.data.iter().enumerate() {
                        if av[idx] <= bv[idx] {
                            self.nodes[a.0].grad.data[idx] += d;
                        } else {
                            self.nodes[b.0].grad.data[idx] += d;
                        }
                    }
                }
                Op::SumAll { x } => {
                    let d = dy.data[0];
                    for g in &mut self.nodes[x.0].grad.data {
                        *g += d;
                    }
                }
                Op::MeanAll { x } => {
                    let n = self.nodes[x.0].value.numel() as f64;
                    let d = dy.data[0] / n;
                    for g in &mut self.nodes[x.0].grad.data {
                        *g += d;
                    }
                }
                Op::GatherRows { table, ids } => {
                    let cols = dy.cols;
                    let tg = &mut self.nodes[table.0].grad;
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..cols {
                            tg.data[id * cols + c] += dy.at(r, c);
                        }
                    }
                }
                Op::SelectCols { x, ids } => {
                    let xg = &mut self.nodes[x.0].grad;
                    let cols = xg.cols;
                    for (r, &id) in ids.iter().enumerate() {
                        xg.data[r * cols + id] += dy.data[r];
                    }
                }
                Op::SliceCols { x, start } => {
                    let xg = &mut self.nodes[x.0].grad;
                    let cols = xg.cols;
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            xg.data[r * cols + start + c] += dy.at(r, c);
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.nodes[p.0].value.cols;
                        let pg = &mut self.nodes[p.0].grad;
                        for r in 0..dy.rows {
                            for c in 0..pc {
                                pg.data[r * pc + c] += dy.at(r, off + c);
                            }
                        }
                        off += pc;
                    }
                }
                Op::LayerNormRows { x, gain, bias, mean, rstd } => {
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gain.0].value.data.clone();
                    let d = xv.cols;
                    let mut dgain = vec![0.0; d];
                    let mut dbias = vec![0.0; d];
                    {
                        let xg = &mut self.nodes[x.0].grad;
                        for r in 0..xv.rows {
                            let xrow = xv.row(r);
                            let dyrow = dy.row(r);
                            let mu = mean[r];
                            let rs = rstd[r];
                            // xhat and the two row means needed by the chain rule
                            let mut m1 = 0.0; // mean(dxhat)
                            let mut m2 = 0.0; // mean(dxhat * xhat)
                            for j in 0..d {
                                let xhat = (xrow[j] - mu) * rs;
                                let dxhat = dyrow[j] * gv[j];
                                m1 += dxhat;
                                m2 += dxhat * xhat;
                                dgain[j] += dyrow[j] * xhat;
                                dbias[j] += dyrow[j];
                            }
                            m1 /= d as f64;
                            m2 /= d as f64;
                            let grow = xg.row_mut(r);
                            for j in 0..d {
                                let xhat = (xrow[j] - mu) * rs;
                                let dxhat = dyrow[j] * gv[j];
                                grow[j] += rs * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                    for (g, v) in self.nodes[gain.0].grad.data.iter_mut().zip(&dgain) {
                        *g += v;
                    }
                    for (g, v) in self.nodes[bias.0].grad.data.iter_mut().zip(&dbias) {
                        *g += v;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_shapes_and_values() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = t.leaf(Matrix::from_vec(3, 1, vec![1.0, 1.0, 1.0]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).shape(), (2, 1));
        assert_eq!(t.value(c).data, vec![6.0, 15.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.leaf(Matrix::zeros(2, 3));
        let b = t.leaf(Matrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "message should name shapes: {msg}");
    }

    #[test]
    fn identity_matmul_preserves_values() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(3, 1, vec![0.5, -1.5, 2.0]));
        let eye = t.leaf(Matrix::from_vec(
            3,
            3,
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        ));
        let y = t.matmul(eye, x).unwrap();
        assert_eq!(t.value(y).data, t.value(x).data);
    }

    #[test]
    fn affine_zero_weights_gives_bias() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(2, 3, vec![1.0; 6]));
        let w = t.param(Matrix::zeros(3, 4));
        let b = t.param(Matrix::from_vec(1, 4, vec![7.0, 8.0, 9.0, 10.0]));
        let y = t.affine(x, w, b).unwrap();
        for r in 0..2 {
            assert_eq!(t.value(y).row(r), &[7.0, 8.0, 9.0, 10.0]);
        }
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 2));
        let err = t.backward(x).unwrap_err();
        assert!(matches!(err, GraphError::NonScalar { .. }));
    }

    #[test]
    fn sum_of_leaf_has_unit_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data, vec![1.0; 4]);
    }

    #[test]
    fn zero_scaled_root_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(3, 1, vec![1.0, 2.0, 3.0]));
        let s = t.sum_all(x);
        let z = t.scale(s, 0.0);
        t.backward(z).unwrap();
        assert_eq!(t.grad(x).data, vec![0.0; 3]);
    }

    #[test]
    fn repeated_backward_accumulates_and_reset_clears() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(2, 1, vec![1.0, 1.0]));
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data, vec![2.0; 2]);
        t.zero_grads();
        assert_eq!(t.grad(x).data, vec![0.0; 2]);
    }

    #[test]
    fn mask_gradient_is_exactly_zero_on_masked_entries() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_vec(4, 1, vec![1.0, 2.0, 3.0, 4.0]));
        let m = t.select_by_mask(x, &[1.0, 0.0, 1.0, 0.0]).unwrap();
        let s = t.sum_all(m);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).data, vec![1.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn select_by_mask_rejects_non_binary() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::zeros(2, 1));
        assert_eq!(
            t.select_by_mask(x, &[0.5, 1.0]).unwrap_err(),
            GraphError::InvalidMask(0.5)
        );
    }

    #[test]
    fn min_tie_routes_to_first() {
        let mut t = Tape::new();
        let a = t.param(Matrix::scalar(2.0));
        let b = t.param(Matrix::scalar(2.0));
        let m = t.min(a, b).unwrap();
        t.backward(m).unwrap();
        assert_eq!(t.grad(a).data[0], 1.0);
        assert_eq!(t.grad(b).data[0], 0.0);
    }

    #[test]
    fn softmax_rows_validates_inputs() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::from_vec(1, 2, vec![0.0, f64::INFINITY]));
        assert!(matches!(
            t.softmax_rows(x, 1.0).unwrap_err(),
            GraphError::NonFiniteInput { .. }
        ));
        let y = t.leaf(Matrix::from_vec(1, 2, vec![0.0, 1.0]));
        assert_eq!(
            t.softmax_rows(y, 0.0).unwrap_err(),
            GraphError::InvalidTemperature(0.0)
        );
    }

    #[test]
    fn determinism_bitwise() {
        let build = || {
            let mut t = Tape::new();
            let x = t.param(Matrix::from_vec(2, 2, vec![0.3, -0.7, 1.9, 0.01]));
            let s = t.softmax_rows(x, 0.7).unwrap();
            let l = t.log(s);
            let m = t.mean_all(l);
            t.backward(m).unwrap();
            (t.value(m).data[0], t.grad(x).data.clone())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
