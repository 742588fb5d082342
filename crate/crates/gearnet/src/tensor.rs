//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Tensors are dense row-major `f64` buffers owned by a [`Tape`]. Every
//! operation appends one node, so tape order is already a topological order
//! and [`Tape::backward`] is a single reverse sweep. The op set is exactly
//! what the training losses need: matmul, bias add, elementwise arithmetic,
//! relu, (log-)softmax, label gather, reductions, a constant scale, and the
//! gradient-reversal trick used by adversarial domain training.
//!
//! Conventions that tests rely on:
//! - relu's subgradient at 0 is 0;
//! - `backward` accumulates into `grad` buffers; callers zero between batches
//!   (fresh tapes per batch get this for free);
//! - no gradient flows through a leaf created with `requires_grad = false`,
//!   which is how a frozen dual model's probabilities enter a guide loss.

use crate::{Error, Result};

/// Handle to a tensor on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Dense row-major tensor plus its persistent gradient buffer.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    /// Accumulated gradient; allocated on first backward pass that reaches it.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One recorded operation. Fields are the input ids plus whatever the
/// backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { lhs: TensorId, rhs: TensorId, m: usize, k: usize, n: usize },
    AddBias { input: TensorId, bias: TensorId, rows: usize, cols: usize },
    Add { lhs: TensorId, rhs: TensorId },
    Sub { lhs: TensorId, rhs: TensorId },
    Mul { lhs: TensorId, rhs: TensorId },
    Scale { input: TensorId, factor: f64 },
    Relu { input: TensorId },
    LogSoftmax { input: TensorId, rows: usize, cols: usize },
    Softmax { input: TensorId, rows: usize, cols: usize },
    Ln { input: TensorId },
    ClampMin { input: TensorId, floor: f64 },
    GatherLabels { input: TensorId, labels: Vec<usize>, cols: usize },
    SumAll { input: TensorId },
    MeanAll { input: TensorId },
    GradReverse { input: TensorId, lambda: f64 },
}

/// Recording tape. Creation order is topological order.
#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.tensors.push(Tensor { data, shape, requires_grad, grad: None });
        self.ops.push(op);
        TensorId(self.tensors.len() - 1)
    }

    /// Inserts a leaf tensor. `data.len()` must match the shape's element count.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch { op: "leaf", left: vec![data.len()], right: shape });
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives gradient (input data, frozen predictions).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let t = &self.tensors[id.0];
        if t.numel() != 1 {
            return Err(Error::contract(format!(
                "scalar_value called on tensor of shape {:?}",
                t.shape
            )));
        }
        Ok(t.data[0])
    }

    fn requires(&self, id: TensorId) -> bool {
        self.tensors[id.0].requires_grad
    }

    fn shape2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::contract(format!("{op} expects a 2-D operand, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`, both operands 2-D.
    pub fn matmul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        let (m, k) = self.shape2(lhs, "matmul")?;
        let (k2, n) = self.shape2(rhs, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(lhs).to_vec(),
                right: self.shape(rhs).to_vec(),
            });
        }
        let a = self.data(lhs);
        let b = self.data(rhs);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul { lhs, rhs, m, k, n }))
    }

    /// Adds a length-`n` bias row to every row of an `[m,n]` input.
    pub fn add_bias(&mut self, input: TensorId, bias: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.shape2(input, "add_bias")?;
        let bs = self.shape(bias);
        if bs != [cols] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: self.shape(input).to_vec(),
                right: bs.to_vec(),
            });
        }
        let x = self.data(input);
        let b = self.data(bias);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(x[i * cols + j] + b[j]);
            }
        }
        let rg = self.requires(input) || self.requires(bias);
        Ok(self.push(out, vec![rows, cols], rg, Op::AddBias { input, bias, rows, cols }))
    }

    fn same_shape(&self, lhs: TensorId, rhs: TensorId, op: &'static str) -> Result<()> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(lhs).to_vec(),
                right: self.shape(rhs).to_vec(),
            });
        }
        Ok(())
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.same_shape(lhs, rhs, "add")?;
        let out: Vec<f64> =
            self.data(lhs).iter().zip(self.data(rhs)).map(|(a, b)| a + b).collect();
        let shape = self.shape(lhs).to_vec();
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(out, shape, rg, Op::Add { lhs, rhs }))
    }

    /// Elementwise difference of two same-shape tensors.
    pub fn sub(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.same_shape(lhs, rhs, "sub")?;
        let out: Vec<f64> =
            self.data(lhs).iter().zip(self.data(rhs)).map(|(a, b)| a - b).collect();
        let shape = self.shape(lhs).to_vec();
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(out, shape, rg, Op::Sub { lhs, rhs }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, lhs: TensorId, rhs: TensorId) -> Result<TensorId> {
        self.same_shape(lhs, rhs, "mul")?;
        let out: Vec<f64> =
            self.data(lhs).iter().zip(self.data(rhs)).map(|(a, b)| a * b).collect();
        let shape = self.shape(lhs).to_vec();
        let rg = self.requires(lhs) || self.requires(rhs);
        Ok(self.push(out, shape, rg, Op::Mul { lhs, rhs }))
    }

    /// Multiplies every element by a compile-time-known constant.
    pub fn scale(&mut self, input: TensorId, factor: f64) -> TensorId {
        let out: Vec<f64> = self.data(input).iter().map(|v| v * factor).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires(input);
        self.push(out, shape, rg, Op::Scale { input, factor })
    }

    /// max(x, 0). Subgradient at 0 is 0.
    pub fn relu(&mut self, input: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(input).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires(input);
        self.push(out, shape, rg, Op::Relu { input })
    }

    /// Row-wise log-softmax of an `[m,n]` tensor, max-shifted so logits with
    /// magnitude up to ~1e4 stay finite. Errors on non-finite input.
    pub fn log_softmax(&mut self, input: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.shape2(input, "log_softmax")?;
        let x = self.data(input);
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("log_softmax input at index {i}")));
        }
        let out = log_softmax_rows(x, rows, cols);
        let rg = self.requires(input);
        Ok(self.push(out, vec![rows, cols], rg, Op::LogSoftmax { input, rows, cols }))
    }

    /// Row-wise softmax of an `[m,n]` tensor. Errors on non-finite input.
    pub fn softmax(&mut self, input: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.shape2(input, "softmax")?;
        let x = self.data(input);
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("softmax input at index {i}")));
        }
        let out = softmax_rows(x, rows, cols);
        let rg = self.requires(input);
        Ok(self.push(out, vec![rows, cols], rg, Op::Softmax { input, rows, cols }))
    }

    /// Elementwise natural log. Inputs must be positive; clamp first if they
    /// might not be.
    pub fn ln(&mut self, input: TensorId) -> Result<TensorId> {
        if let Some(i) = self.data(input).iter().position(|&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "ln input at index {i} is not a positive finite number"
            )));
        }
        let out: Vec<f64> = self.data(input).iter().map(|v| v.ln()).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires(input);
        Ok(self.push(out, shape, rg, Op::Ln { input }))
    }

    /// max(x, floor). Gradient passes where x >= floor, is 0 where clamped.
    pub fn clamp_min(&mut self, input: TensorId, floor: f64) -> TensorId {
        let out: Vec<f64> = self.data(input).iter().map(|&v| v.max(floor)).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.requires(input);
        self.push(out, shape, rg, Op::ClampMin { input, floor })
    }

    /// Picks entry `[i, labels[i]]` from each row of an `[m,n]` tensor,
    /// producing an `[m]` vector. Labels must be < n.
    pub fn gather_labels(&mut self, input: TensorId, labels: &[usize]) -> Result<TensorId> {
        let (rows, cols) = self.shape2(input, "gather_labels")?;
        if labels.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "gather_labels",
                left: vec![rows, cols],
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::contract(format!(
                "gather_labels: label {bad} out of range for {cols} classes"
            )));
        }
        let x = self.data(input);
        let out: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| x[i * cols + l]).collect();
        let rg = self.requires(input);
        Ok(self.push(out, vec![rows], rg, Op::GatherLabels { input, labels: labels.to_vec(), cols }))
    }

    /// Sum of all elements, as a shape-`[1]` scalar.
    pub fn sum_all(&mut self, input: TensorId) -> TensorId {
        let s: f64 = self.data(input).iter().sum();
        let rg = self.requires(input);
        self.push(vec![s], vec![1], rg, Op::SumAll { input })
    }

    /// Mean of all elements, as a shape-`[1]` scalar.
    pub fn mean_all(&mut self, input: TensorId) -> Result<TensorId> {
        let n = self.tensors[input.0].numel();
        if n == 0 {
            return Err(Error::contract("mean_all over an empty tensor"));
        }
        let s: f64 = self.data(input).iter().sum::<f64>() / n as f64;
        let rg = self.requires(input);
        Ok(self.push(vec![s], vec![1], rg, Op::MeanAll { input }))
    }

    /// Identity forward; backward multiplies the incoming gradient by
    /// `-lambda`. This is the adversarial "gradient reversal" connector.
    pub fn grad_reverse(&mut self, input: TensorId, lambda: f64) -> TensorId {
        let out = self.data(input).to_vec();
        let shape = self.shape(input).to_vec();
        let rg = self.requires(input);
        self.push(out, shape, rg, Op::GradReverse { input, lambda })
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulates into each reached
    /// tensor's `grad` buffer (allocating on first touch), so calling twice
    /// doubles leaf gradients; use [`Tape::clear_grads`] between batches when
    /// reusing a tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensors[loss.0].numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.tensors[loss.0].shape
            )));
        }
        // Per-call adjoints, separate from persistent grads: persistent
        // buffers must never feed propagation or repeated calls would
        // compound instead of accumulate.
        let mut adj: Vec<Vec<f64>> = self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        adj[loss.0][0] = 1.0;

        for idx in (0..=loss.0).rev() {
            if !self.tensors[idx].requires_grad {
                continue;
            }
            if adj[idx].iter().all(|&g| g == 0.0) && idx != loss.0 {
                continue;
            }
            // Split the adjoint out so input adjoints can be borrowed mutably.
            let g = std::mem::take(&mut adj[idx]);
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::MatMul { lhs, rhs, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if self.requires(*lhs) {
                        let b = &self.tensors[rhs.0].data;
                        let da = &mut adj[lhs.0];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * b[p * n + j];
                                }
                                da[i * k + p] += acc;
                            }
                        }
                    }
                    if self.requires(*rhs) {
                        let a = &self.tensors[lhs.0].data;
                        let db = &mut adj[rhs.0];
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = 0.0;
                                for i in 0..m {
                                    acc += a[i * k + p] * g[i * n + j];
                                }
                                db[p * n + j] += acc;
                            }
                        }
                    }
                }
                Op::AddBias { input, bias, rows, cols } => {
                    let (rows, cols) = (*rows, *cols);
                    if self.requires(*input) {
                        for (dst, src) in adj[input.0].iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                    if self.requires(*bias) {
                        let db = &mut adj[bias.0];
                        for i in 0..rows {
                            for j in 0..cols {
                                db[j] += g[i * cols + j];
                            }
                        }
                    }
                }
                Op::Add { lhs, rhs } => {
                    if self.requires(*lhs) {
                        for (dst, src) in adj[lhs.0].iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                    if self.requires(*rhs) {
                        for (dst, src) in adj[rhs.0].iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                }
                Op::Sub { lhs, rhs } => {
                    if self.requires(*lhs) {
                        for (dst, src) in adj[lhs.0].iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                    if self.requires(*rhs) {
                        for (dst, src) in adj[rhs.0].iter_mut().zip(&g) {
                            *dst -= src;
                        }
                    }
                }
                Op::Mul { lhs, rhs } => {
                    if self.requires(*lhs) {
                        let other = &self.tensors[rhs.0].data;
                        let da = &mut adj[lhs.0];
                        for i in 0..g.len() {
                            da[i] += g[i] * other[i];
                        }
                    }
                    if self.requires(*rhs) {
                        let other = &self.tensors[lhs.0].data;
                        let db = &mut adj[rhs.0];
                        for i in 0..g.len() {
                            db[i] += g[i] * other[i];
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    if self.requires(*input) {
                        let f = *factor;
                        for (dst, src) in adj[input.0].iter_mut().zip(&g) {
                            *dst += f * src;
                        }
                    }
                }
                Op::Relu { input } => {
                    if self.requires(*input) {
                        let x = &self.tensors[input.0].data;
                        let da = &mut adj[input.0];
                        for i in 0..g.len() {
                            if x[i] > 0.0 {
                                da[i] += g[i];
                            }
                        }
                    }
                }
                Op::LogSoftmax { input, rows, cols } => {
                    if self.requires(*input) {
                        let out = &self.tensors[idx].data;
                        let da = &mut adj[input.0];
                        for r in 0..*rows {
                            let row_g = &g[r * cols..(r + 1) * cols];
                            let gsum: f64 = row_g.iter().sum();
                            for c in 0..*cols {
                                let p = out[r * cols + c].exp();
                                da[r * cols + c] += row_g[c] - p * gsum;
                            }
                        }
                    }
                }
                Op::Softmax { input, rows, cols } => {
                    if self.requires(*input) {
                        let p = &self.tensors[idx].data;
                        let da = &mut adj[input.0];
                        for r in 0..*rows {
                            let row_g = &g[r * cols..(r + 1) * cols];
                            let row_p = &p[r * cols..(r + 1) * cols];
                            let dot: f64 = row_g.iter().zip(row_p).map(|(gi, pi)| gi * pi).sum();
                            for c in 0..*cols {
                                da[r * cols + c] += row_p[c] * (row_g[c] - dot);
                            }
                        }
                    }
                }
                Op::Ln { input } => {
                    if self.requires(*input) {
                        let x = &self.tensors[input.0].data;
                        let da = &mut adj[input.0];
                        for i in 0..g.len() {
                            da[i] += g[i] / x[i];
                        }
                    }
                }
                Op::ClampMin { input, floor } => {
                    if self.requires(*input) {
                        let x = &self.tensors[input.0].data;
                        let da = &mut adj[input.0];
                        for i in 0..g.len() {
                            if x[i] >= *floor {
                                da[i] += g[i];
                            }
                        }
                    }
                }
                Op::GatherLabels { input, labels, cols } => {
                    if self.requires(*input) {
                        let da = &mut adj[input.0];
                        for (i, &l) in labels.iter().enumerate() {
                            da[i * cols + l] += g[i];
                        }
                    }
                }
                Op::SumAll { input } => {
                    if self.requires(*input) {
                        for dst in adj[input.0].iter_mut() {
                            *dst += g[0];
                        }
                    }
                }
                Op::MeanAll { input } => {
                    if self.requires(*input) {
                        let n = self.tensors[input.0].numel() as f64;
                        let share = g[0] / n;
                        for dst in adj[input.0].iter_mut() {
                            *dst += share;
                        }
                    }
                }
                Op::GradReverse { input, lambda } => {
                    if self.requires(*input) {
                        let f = -*lambda;
                        for (dst, src) in adj[input.0].iter_mut().zip(&g) {
                            *dst += f * src;
                        }
                    }
                }
            }
            adj[idx] = g;
        }

        for (t, local) in self.tensors.iter_mut().zip(&adj) {
            if t.requires_grad {
                let grad = t.grad.get_or_insert_with(|| vec![0.0; local.len()]);
                for (dst, src) in grad.iter_mut().zip(local) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Drops every accumulated gradient buffer.
    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }
}

// ── plain (no-tape) kernels, shared with inference paths ────────────────

/// Row-wise softmax on raw data, max-shifted for overflow safety.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..cols {
            let e = (row[c] - m).exp();
            out[r * cols + c] = e;
            z += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= z;
        }
    }
    out
}

/// Row-wise log-softmax on raw data, max-shifted for overflow safety.
pub(crate) fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        for c in 0..cols {
            out[r * cols + c] = row[c] - lse;
        }
    }
    out
}

/// Index of the row maximum; ties break toward the smallest index.
pub fn argmax_tie_smallest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ── optimizer ────────────────────────────────────────────────────────────

/// One SGD-with-momentum update over aligned parameter/gradient/velocity
/// lists: `v <- momentum*v + g`, then `p <- p - eta*v`.
pub fn sgd_step(
    params: &mut [Vec<f64>],
    grads: &[Vec<f64>],
    eta: f64,
    momentum: f64,
    velocity: &mut [Vec<f64>],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            left: vec![params.len(), velocity.len()],
            right: vec![grads.len()],
        });
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if p.len() != g.len() || p.len() != v.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                left: vec![p.len(), v.len()],
                right: vec![g.len()],
            });
        }
        for i in 0..p.len() {
            v[i] = momentum * v[i] + g[i];
            p[i] -= eta * v[i];
        }
    }
    Ok(())
}
