//! Wengert tape: reverse-mode differentiation via operation recording.
//!
//! The forward pass records each operation and its output into an arena of
//! nodes; `backward` replays the list in reverse, accumulating vector-Jacobian
//! products into per-node gradient buffers. Every operation's inputs precede
//! it in the arena, so a single reverse sweep visits each node exactly once.

use super::kernels;
use super::params::{ParamId, ParamSet};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Identity of a tracked tensor within one tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Diagnostics returned by softmax: rows where every entry was masked out.
/// Such rows are defined as all-zeros output, not an error (top-k plus
/// masking can produce them legitimately).
#[derive(Debug, Clone, Default)]
pub struct SoftmaxDiag {
    pub fully_masked_rows: Vec<usize>,
}

enum Op<F: Real> {
    Leaf,
    /// out = a @ b
    Matmul { a: Var, b: Var },
    /// out = a @ bᵀ
    MatmulTB { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    /// out[i,:] = x[i,:] + bias
    AddBias { x: Var, bias: Var },
    Scale { x: Var, c: F },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Silu { x: Var },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    /// Active set already includes the optional top-k selection.
    SoftmaxRows { x: Var, active: Vec<bool> },
    Rope { x: Var, heads: usize, head_dim: usize, pos_offset: usize, base: f64 },
    EmbedLookup { table: Var, ids: Vec<u32> },
    /// Mean cross entropy over the given logit rows.
    CrossEntropy { logits: Var, positions: Vec<usize>, targets: Vec<u32>, probs: Vec<F> },
    SumAll { x: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { x: Var, start: usize, len: usize },
    /// y[i,j] = x[i,j] / max(Σ_j x[i,j], eps)
    NormalizeRows { x: Var, eps: F },
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::MatmulTB { .. } => "matmul_tb",
            Op::Transpose { .. } => "transpose",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Silu { .. } => "silu",
            Op::RmsNorm { .. } => "rms_norm",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::Rope { .. } => "rope",
            Op::EmbedLookup { .. } => "embed_lookup",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SumAll { .. } => "sum_all",
            Op::ConcatRows { .. } => "concat_rows",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::NormalizeRows { .. } => "normalize_rows",
        }
    }
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    trainable: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    /// Memoized leaf vars for registered parameters, indexed by ParamId.
    param_vars: Vec<Option<Var>>,
    backward_done: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            param_vars: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, trainable: bool) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node { value, op, trainable });
        self.grads.push(None);
        id
    }

    pub fn leaf(&mut self, value: Tensor<F>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Register a model parameter as a trainable leaf; repeated calls for the
    /// same parameter return the same var so gradient contributions merge.
    pub fn param_var(&mut self, ps: &ParamSet<F>, id: ParamId) -> Var {
        if self.param_vars.len() < ps.len() {
            self.param_vars.resize(ps.len(), None);
        }
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.leaf(ps.tensor(id).clone(), true);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).unwrap())
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn shape2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op, lhs: s.to_vec(), rhs: vec![] });
        }
        Ok((s[0], s[1]))
    }

    // ── recorded operations ─────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a, "matmul")?;
        let (k2, n) = self.shape2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::Matmul { a, b }, false))
    }

    /// a @ bᵀ where a is m×k and b is n×k.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape2(a, "matmul_tb")?;
        let (n, k2) = self.shape2(b, "matmul_tb")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_tb",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let data = kernels::matmul_tb(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MatmulTB { a, b }, false))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape2(x, "transpose")?;
        let data = kernels::transpose(self.value(x).data(), r, c);
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.push(t, Op::Transpose { x }, false))
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x + *y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }, false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x - *y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Sub { a, b }, false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| *x * *y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul { a, b }, false))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.shape2(x, "add_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: vec![r, c],
                rhs: self.value(bias).shape().to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| *v + b[i % c])
            .collect();
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::AddBias { x, bias }, false))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let data = self.value(x).data().iter().map(|v| *v * c).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(t, Op::Scale { x, c }, false)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| kernels::sigmoid_scalar(*v))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(t, Op::Sigmoid { x }, false)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(t, Op::Tanh { x }, false)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| kernels::silu_scalar(*v))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        self.push(t, Op::Silu { x }, false)
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let (r, c) = self.shape2(x, "rms_norm")?;
        if self.value(gain).shape() != [c] {
            return Err(Error::ShapeMismatch {
                op: "rms_norm",
                lhs: vec![r, c],
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let (data, inv_rms) =
            kernels::rms_norm(self.value(x).data(), self.value(gain).data(), r, c, eps);
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, false))
    }

    /// Row softmax with an optional boolean mask (true = participates) and
    /// optional top-k restriction to the k largest logits per row.
    pub fn softmax_rows(
        &mut self,
        x: Var,
        mask: Option<&[bool]>,
        top_k: Option<usize>,
    ) -> Result<(Var, SoftmaxDiag)> {
        let (r, c) = self.shape2(x, "softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::ShapeMismatch {
                    op: "softmax_rows",
                    lhs: vec![r, c],
                    rhs: vec![m.len()],
                });
            }
        }
        if let Some(k) = top_k {
            if k == 0 || k > c {
                return Err(Error::Config(format!(
                    "top_k must be in 1..={c}, got {k}"
                )));
            }
        }
        let mut active = match mask {
            Some(m) => m.to_vec(),
            None => vec![true; r * c],
        };
        if let Some(k) = top_k {
            kernels::top_k_select(self.value(x).data(), &mut active, r, c, k);
        }
        let mut fully_masked = Vec::new();
        let data =
            kernels::softmax_rows_masked(self.value(x).data(), &active, r, c, &mut fully_masked);
        let t = Tensor::new(vec![r, c], data)?;
        let v = self.push(t, Op::SoftmaxRows { x, active }, false);
        Ok((v, SoftmaxDiag { fully_masked_rows: fully_masked }))
    }

    /// Rotary rotation over a T×(heads·head_dim) matrix. Positions are
    /// absolute: row t is rotated by angle(pos_offset + t).
    pub fn rope(&mut self, x: Var, heads: usize, pos_offset: usize, base: f64) -> Result<Var> {
        let (t_len, width) = self.shape2(x, "rope")?;
        if width % heads != 0 {
            return Err(Error::Config(format!(
                "rope: width {width} not divisible by {heads} heads"
            )));
        }
        let head_dim = width / heads;
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope: head dimension {head_dim} must be even"
            )));
        }
        let mut data = self.value(x).data().to_vec();
        kernels::rope_in_place(&mut data, t_len, heads, head_dim, pos_offset, base, 1.0);
        let t = Tensor::new(vec![t_len, width], data)?;
        Ok(self.push(t, Op::Rope { x, heads, head_dim, pos_offset, base }, false))
    }

    pub fn embed_lookup(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (vocab, d) = self.shape2(table, "embed_lookup")?;
        if let Some(bad) = ids.iter().find(|&&i| i as usize >= vocab) {
            return Err(Error::Vocab(format!(
                "token id {bad} out of range (vocab size {vocab})"
            )));
        }
        let mut data = vec![F::zero(); ids.len() * d];
        for (t, &id) in ids.iter().enumerate() {
            let src = &self.value(table).data()[id as usize * d..(id as usize + 1) * d];
            data[t * d..(t + 1) * d].copy_from_slice(src);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(t, Op::EmbedLookup { table, ids: ids.to_vec() }, false))
    }

    /// Mean next-token cross entropy over logit rows `positions`;
    /// `targets[i]` is the reference id for row `positions[i]`.
    pub fn cross_entropy_mean(
        &mut self,
        logits: Var,
        positions: Vec<usize>,
        targets: Vec<u32>,
    ) -> Result<Var> {
        let (rows, vocab) = self.shape2(logits, "cross_entropy")?;
        if positions.len() != targets.len() || positions.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![positions.len()],
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = positions.iter().find(|&&p| p >= rows) {
            return Err(Error::Tape(format!(
                "cross_entropy position {bad} out of range ({rows} rows)"
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Vocab(format!(
                "target id {bad} out of range (vocab size {vocab})"
            )));
        }
        let (mean, probs) =
            kernels::cross_entropy_rows(self.value(logits).data(), vocab, &positions, &targets);
        let t = Tensor::scalar(mean);
        Ok(self.push(t, Op::CrossEntropy { logits, positions, targets, probs }, false))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let mut acc = F::zero();
        for v in self.value(x).data() {
            acc += *v;
        }
        self.push(Tensor::scalar(acc), Op::SumAll { x }, false)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (_, c0) = self.shape2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.shape2(p, "concat_rows")?;
            if c != c0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c0],
                    rhs: vec![r, c],
                });
            }
            rows += r;
        }
        let mut data = Vec::with_capacity(rows * c0);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, c0], data)?;
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, false))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let (r0, _) = self.shape2(parts[0], "concat_cols")?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.shape2(p, "concat_cols")?;
            if r != r0 {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: vec![r0, cols],
                    rhs: vec![r, c],
                });
            }
            cols += c;
        }
        let mut data = vec![F::zero(); r0 * cols];
        let mut col_off = 0;
        for &p in parts {
            let (_, c) = self.shape2(p, "concat_cols")?;
            let src = self.value(p).data();
            for r in 0..r0 {
                data[r * cols + col_off..r * cols + col_off + c]
                    .copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            col_off += c;
        }
        let t = Tensor::new(vec![r0, cols], data)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }, false))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape2(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                lhs: vec![r, c],
                rhs: vec![start, len],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&src[row * c + start..row * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start, len }, false))
    }

    /// y[i,j] = x[i,j] / max(Σ_j x[i,j], eps). Rows whose sum is below eps
    /// are divided by eps instead, so zero-mass rows stay (near) zero.
    pub fn normalize_rows(&mut self, x: Var, eps: F) -> Result<Var> {
        let (r, c) = self.shape2(x, "normalize_rows")?;
        let src = self.value(x).data();
        let mut data = vec![F::zero(); r * c];
        for row in 0..r {
            let s: F = src[row * c..(row + 1) * c]
                .iter()
                .fold(F::zero(), |acc, v| acc + *v);
            let denom = if s > eps { s } else { eps };
            for col in 0..c {
                data[row * c + col] = src[row * c + col] / denom;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::NormalizeRows { x, eps }, false))
    }

    // ── backward ────────────────────────────────────────────────────────

    fn accumulate(grads: &mut [Option<Vec<F>>], v: Var, delta: &[F]) {
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += *di;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    /// Reverse traversal from a scalar loss. Fills gradient buffers for every
    /// node gradient flows to. Calling twice on one tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; gradients would double-accumulate".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        let loss_value = self.nodes[loss.0].value.data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                context: "loss value before backward",
                op: Some(self.first_non_finite_op().unwrap_or_else(|| "unknown".into())),
            });
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..self.nodes.len()).rev() {
            let d_out = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if d_out.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: "gradient during backward traversal",
                    op: Some(self.nodes[idx].op.name().to_string()),
                });
            }
            self.backward_node(idx, &d_out)?;
            // Leaf gradients are the output of the whole pass; keep them.
            if matches!(self.nodes[idx].op, Op::Leaf) || self.nodes[idx].trainable {
                self.grads[idx] = Some(d_out);
            }
        }
        Ok(())
    }

    /// Scan nodes in execution order for the first non-finite value; used to
    /// identify the operation that introduced a NaN/Inf.
    pub fn first_non_finite_op(&self) -> Option<String> {
        self.nodes
            .iter()
            .find(|n| n.value.first_non_finite().is_some())
            .map(|n| n.op.name().to_string())
    }

    fn backward_node(&mut self, idx: usize, d_out: &[F]) -> Result<()> {
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| nodes[v.0].value.shape();

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                // dA += dC·Bᵀ ; dB += Aᵀ·dC
                let mut da = vec![F::zero(); m * k];
                kernels::matmul_tb_acc(d_out, val(*b), &mut da, m, n, k);
                Self::accumulate(grads, *a, &da);
                let mut db = vec![F::zero(); k * n];
                kernels::matmul_ta_acc(val(*a), d_out, &mut db, k, m, n);
                Self::accumulate(grads, *b, &db);
            }
            Op::MatmulTB { a, b } => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[0];
                // C = A·Bᵀ: dA += dC·B ; dB += dCᵀ·A
                let mut da = vec![F::zero(); m * k];
                kernels::matmul_acc(d_out, val(*b), &mut da, m, n, k);
                Self::accumulate(grads, *a, &da);
                let mut db = vec![F::zero(); n * k];
                kernels::matmul_ta_acc(d_out, val(*a), &mut db, n, m, k);
                Self::accumulate(grads, *b, &db);
            }
            Op::Transpose { x } => {
                let (r, c) = (shape(*x)[0], shape(*x)[1]);
                let dx = kernels::transpose(d_out, c, r);
                Self::accumulate(grads, *x, &dx);
            }
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, d_out);
                Self::accumulate(grads, *b, d_out);
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, d_out);
                let neg: Vec<F> = d_out.iter().map(|v| -*v).collect();
                Self::accumulate(grads, *b, &neg);
            }
            Op::Mul { a, b } => {
                let da: Vec<F> = d_out.iter().zip(val(*b)).map(|(g, y)| *g * *y).collect();
                Self::accumulate(grads, *a, &da);
                let db: Vec<F> = d_out.iter().zip(val(*a)).map(|(g, x)| *g * *x).collect();
                Self::accumulate(grads, *b, &db);
            }
            Op::AddBias { x, bias } => {
                Self::accumulate(grads, *x, d_out);
                let c = shape(*bias)[0];
                let mut db = vec![F::zero(); c];
                for (i, g) in d_out.iter().enumerate() {
                    db[i % c] += *g;
                }
                Self::accumulate(grads, *bias, &db);
            }
            Op::Scale { x, c } => {
                let dx: Vec<F> = d_out.iter().map(|g| *g * *c).collect();
                Self::accumulate(grads, *x, &dx);
            }
            Op::Sigmoid { x } => {
                let y = nodes[idx].value.data();
                let dx: Vec<F> = d_out
                    .iter()
                    .zip(y)
                    .map(|(g, s)| *g * *s * (F::one() - *s))
                    .collect();
                Self::accumulate(grads, *x, &dx);
            }
            Op::Tanh { x } => {
                let y = nodes[idx].value.data();
                let dx: Vec<F> = d_out
                    .iter()
                    .zip(y)
                    .map(|(g, t)| *g * (F::one() - *t * *t))
                    .collect();
                Self::accumulate(grads, *x, &dx);
            }
            Op::Silu { x } => {
                let xs = val(*x);
                let dx: Vec<F> = d_out
                    .iter()
                    .zip(xs)
                    .map(|(g, xv)| {
                        let s = kernels::sigmoid_scalar(*xv);
                        *g * s * (F::one() + *xv * (F::one() - s))
                    })
                    .collect();
                Self::accumulate(grads, *x, &dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (r, c) = (shape(*x)[0], shape(*x)[1]);
                let xs = val(*x);
                let gs = val(*gain);
                let nf = F::from_f64(c as f64);
                let mut dx = vec![F::zero(); r * c];
                let mut dgain = vec![F::zero(); c];
                for row in 0..r {
                    let ir = inv_rms[row];
                    let xr = &xs[row * c..(row + 1) * c];
                    let gr = &d_out[row * c..(row + 1) * c];
                    // Σ_c dy_c·g_c·x_c for the coupling term
                    let mut coupling = F::zero();
                    for col in 0..c {
                        coupling += gr[col] * gs[col] * xr[col];
                        dgain[col] += gr[col] * xr[col] * ir;
                    }
                    let k = ir * ir * ir / nf * coupling;
                    let dxr = &mut dx[row * c..(row + 1) * c];
                    for col in 0..c {
                        dxr[col] = gr[col] * gs[col] * ir - k * xr[col];
                    }
                }
                Self::accumulate(grads, *x, &dx);
                Self::accumulate(grads, *gain, &dgain);
            }
            Op::SoftmaxRows { x, active } => {
                let (r, c) = (shape(*x)[0], shape(*x)[1]);
                let y = nodes[idx].value.data();
                let mut dx = vec![F::zero(); r * c];
                for row in 0..r {
                    let yr = &y[row * c..(row + 1) * c];
                    let gr = &d_out[row * c..(row + 1) * c];
                    let ar = &active[row * c..(row + 1) * c];
                    let mut dot = F::zero();
                    for col in 0..c {
                        if ar[col] {
                            dot += gr[col] * yr[col];
                        }
                    }
                    let dxr = &mut dx[row * c..(row + 1) * c];
                    for col in 0..c {
                        if ar[col] {
                            dxr[col] = yr[col] * (gr[col] - dot);
                        }
                    }
                }
                Self::accumulate(grads, *x, &dx);
            }
            Op::Rope { x, heads, head_dim, pos_offset, base } => {
                // rotation is orthogonal: dX = R(−θ)·dY
                let t_len = shape(*x)[0];
                let mut dx = d_out.to_vec();
                kernels::rope_in_place(&mut dx, t_len, *heads, *head_dim, *pos_offset, *base, -1.0);
                Self::accumulate(grads, *x, &dx);
            }
            Op::EmbedLookup { table, ids } => {
                let d = shape(*table)[1];
                let n = shape(*table)[0] * d;
                let mut dt = vec![F::zero(); n];
                for (t, &id) in ids.iter().enumerate() {
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    let src = &d_out[t * d..(t + 1) * d];
                    for (a, b) in dst.iter_mut().zip(src) {
                        *a += *b;
                    }
                }
                Self::accumulate(grads, *table, &dt);
            }
            Op::CrossEntropy { logits, positions, targets, probs } => {
                let (rows, vocab) = (shape(*logits)[0], shape(*logits)[1]);
                let g = d_out[0] / F::from_f64(positions.len() as f64);
                let mut dl = vec![F::zero(); rows * vocab];
                for (pi, (&row, &tgt)) in positions.iter().zip(targets).enumerate() {
                    let pr = &probs[pi * vocab..(pi + 1) * vocab];
                    let dr = &mut dl[row * vocab..(row + 1) * vocab];
                    for c in 0..vocab {
                        dr[c] += g * pr[c];
                    }
                    dr[tgt as usize] -= g;
                }
                Self::accumulate(grads, *logits, &dl);
            }
            Op::SumAll { x } => {
                let g = d_out[0];
                let dx = vec![g; nodes[x.0].value.numel()];
                Self::accumulate(grads, *x, &dx);
            }
            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    let slice = d_out[off..off + n].to_vec();
                    Self::accumulate(grads, p, &slice);
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let rows = nodes[idx].value.shape()[0];
                let total_cols = nodes[idx].value.shape()[1];
                let mut col_off = 0;
                for p in parts {
                    let c = nodes[p.0].value.shape()[1];
                    let mut dp = vec![F::zero(); rows * c];
                    for r in 0..rows {
                        dp[r * c..(r + 1) * c].copy_from_slice(
                            &d_out[r * total_cols + col_off..r * total_cols + col_off + c],
                        );
                    }
                    Self::accumulate(grads, p, &dp);
                    col_off += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = (shape(*x)[0], shape(*x)[1]);
                let (start, len) = (*start, *len);
                let mut dx = vec![F::zero(); r * c];
                for row in 0..r {
                    dx[row * c + start..row * c + start + len]
                        .copy_from_slice(&d_out[row * len..(row + 1) * len]);
                }
                Self::accumulate(grads, *x, &dx);
            }
            Op::NormalizeRows { x, eps } => {
                let (r, c) = (shape(*x)[0], shape(*x)[1]);
                let eps = *eps;
                let xs = val(*x);
                let mut dx = vec![F::zero(); r * c];
                for row in 0..r {
                    let xr = &xs[row * c..(row + 1) * c];
                    let gr = &d_out[row * c..(row + 1) * c];
                    let s = xr.iter().fold(F::zero(), |acc, v| acc + *v);
                    let dxr = &mut dx[row * c..(row + 1) * c];
                    if s > eps {
                        let mut dot = F::zero();
                        for col in 0..c {
                            dot += gr[col] * xr[col];
                        }
                        let k = dot / (s * s);
                        for col in 0..c {
                            dxr[col] = gr[col] / s - k;
                        }
                    } else {
                        for col in 0..c {
                            dxr[col] = gr[col] / eps;
                        }
                    }
                }
                Self::accumulate(grads, *x, &dx);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(2, 2, &[1.0, -2.0, 3.0, 0.5]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_sum_is_x() {
        let mut tape = Tape::new();
        let data = [1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(t2(2, 2, &data), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &data);
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0f64), true);
        let loss = tape.scale(x, 3.0);
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(err.to_string().contains("already ran"));
    }

    #[test]
    fn non_scalar_loss_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 2, &[1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, &[0.0; 6]), false);
        let b = tape.leaf(t2(2, 2, &[0.0; 4]), false);
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn nan_loss_reports_first_offending_op() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(f64::NAN), true);
        let y = tape.scale(x, 1.0);
        let err = tape.backward(y).unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn masked_softmax_grad_is_zero_on_inactive() {
        let mut tape = Tape::new();
        let x = tape.leaf(t2(1, 3, &[1.0, 5.0, 2.0]), true);
        let (y, diag) = tape
            .softmax_rows(x, Some(&[true, false, true]), None)
            .unwrap();
        assert!(diag.fully_masked_rows.is_empty());
        let loss = tape.sum_all(y);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn param_var_is_memoized() {
        use super::super::params::ParamSet;
        let mut ps = ParamSet::<f64>::new();
        let id = ps.register("w", Tensor::scalar(1.5), false);
        let mut tape = Tape::new();
        let v1 = tape.param_var(&ps, id);
        let v2 = tape.param_var(&ps, id);
        assert_eq!(v1, v2);
    }
}
