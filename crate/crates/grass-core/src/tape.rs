//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Forward ops append a node holding the output tensor and an op record;
//! node ids are therefore already in topological order and the backward
//! pass is a single reverse sweep. Gradient accumulation is additive, so
//! fan-out falls out of the bookkeeping. All kernels reduce in a fixed
//! sequential order: repeated runs on the same inputs are bit-identical.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::element::Element;
use crate::error::CoreError;
use crate::tensor::{split_matrix_shape, Tensor};
use crate::Result;

/// Index of a value on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

impl ValueId {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYERNORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: ValueId, b: ValueId },
    Add { a: ValueId, b: ValueId },
    AddBias { x: ValueId, bias: ValueId },
    Mul { a: ValueId, b: ValueId },
    Scale { x: ValueId, factor: f64 },
    Gelu { x: ValueId },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId },
    Softmax { x: ValueId },
    CausalSoftmax { x: ValueId },
    Embedding { table: ValueId, ids: Vec<u32> },
    CrossEntropy { logits: ValueId, targets: Vec<i64> },
    TransposeLast2 { x: ValueId },
    Permute { x: ValueId, perm: Vec<usize> },
    Reshape { x: ValueId },
    Sum { x: ValueId },
}

#[derive(Debug)]
struct Node<E: Element> {
    value: Tensor<E>,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients produced by a backward sweep.
#[derive(Debug)]
pub struct Gradients<E: Element> {
    slots: Vec<Option<Vec<E>>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, id: ValueId) -> Option<&[E]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    pub fn take(&mut self, id: ValueId) -> Option<Vec<E>> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

/// The computation graph for one forward/backward cycle.
#[derive(Debug)]
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<E> {
        &self.nodes[id.0].value
    }

    /// Registers an input tensor. Its requires-grad flag decides whether
    /// the backward sweep materializes a gradient for it.
    pub fn leaf(&mut self, t: Tensor<E>) -> Result<ValueId> {
        if !t.all_finite() {
            return Err(CoreError::numerical("leaf input"));
        }
        let needs = t.requires_grad();
        Ok(self.push(t, Op::Leaf, needs))
    }

    /// Registers a constant input (never differentiated).
    pub fn constant(&mut self, mut t: Tensor<E>) -> Result<ValueId> {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    fn push(&mut self, value: Tensor<E>, op: Op, needs_grad: bool) -> ValueId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        ValueId(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, op_name: &'static str, value: Tensor<E>, op: Op) -> Result<ValueId> {
        if !value.all_finite() {
            return Err(CoreError::numerical(op_name));
        }
        let needs = self.op_inputs_need_grad(&op);
        Ok(self.push(value, op, needs))
    }

    fn op_inputs_need_grad(&self, op: &Op) -> bool {
        let needs = |id: &ValueId| self.nodes[id.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => needs(a) || needs(b),
            Op::AddBias { x, bias } => needs(x) || needs(bias),
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Softmax { x }
            | Op::CausalSoftmax { x }
            | Op::TransposeLast2 { x }
            | Op::Permute { x, .. }
            | Op::Reshape { x }
            | Op::Sum { x } => needs(x),
            Op::LayerNorm { x, gamma, beta } => needs(x) || needs(gamma) || needs(beta),
            Op::Embedding { table, .. } => needs(table),
            Op::CrossEntropy { logits, .. } => needs(logits),
        }
    }

    // ── Forward ops ─────────────────────────────────────────────────

    /// Matrix product over the last two axes. The right operand is either
    /// rank-2 (shared across all leading batch axes of the left operand)
    /// or carries identical leading axes.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ashape, bshape) = (self.value(a).shape(), self.value(b).shape());
        let (abatch, m, k) = split_matrix_shape(ashape)
            .ok_or_else(|| CoreError::shape("matmul", format!("lhs rank < 2: {ashape:?}")))?;
        let (bbatch, bk, n) = split_matrix_shape(bshape)
            .ok_or_else(|| CoreError::shape("matmul", format!("rhs rank < 2: {bshape:?}")))?;
        if bk != k {
            return Err(CoreError::shape(
                "matmul",
                format!("inner dims differ: lhs {ashape:?} rhs {bshape:?}"),
            ));
        }
        let broadcast_rhs = bbatch.is_empty();
        if !broadcast_rhs && bbatch != abatch {
            return Err(CoreError::shape(
                "matmul",
                format!("batch dims differ: lhs {ashape:?} rhs {bshape:?}"),
            ));
        }
        let nb: usize = abatch.iter().product();
        let mut out_shape = abatch.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let adata = self.value(a).data();
        let bdata = self.value(b).data();
        let mut out = vec![E::ZERO; nb * m * n];
        let b_stride = if broadcast_rhs { 0 } else { k * n };
        for batch in 0..nb {
            let abase = batch * m * k;
            let bbase = batch * b_stride;
            let obase = batch * m * n;
            for i in 0..m {
                for p in 0..k {
                    let av = adata[abase + i * k + p];
                    let brow = bbase + p * n;
                    let orow = obase + i * n;
                    for j in 0..n {
                        out[orow + j] += av * bdata[brow + j];
                    }
                }
            }
        }
        self.push_checked("matmul", Tensor::new(out_shape, out)?, Op::Matmul { a, b })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::shape(
                "add",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("add", Tensor::new(shape, data)?, Op::Add { a, b })
    }

    /// Adds a lower-rank tensor broadcast over the leading axes, the only
    /// broadcasting form the engine supports.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let xshape = self.value(x).shape().to_vec();
        let bshape = self.value(bias).shape();
        if bshape.is_empty() || bshape.len() >= xshape.len() {
            return Err(CoreError::shape(
                "add_bias",
                format!("bias rank {} vs input rank {}", bshape.len(), xshape.len()),
            ));
        }
        if &xshape[xshape.len() - bshape.len()..] != bshape {
            return Err(CoreError::shape(
                "add_bias",
                format!("bias {bshape:?} is not a suffix of input {xshape:?}"),
            ));
        }
        let bn = self.value(bias).numel();
        let data: Vec<E> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + self.value(bias).data()[i % bn])
            .collect();
        self.push_checked("add_bias", Tensor::new(xshape, data)?, Op::AddBias { x, bias })
    }

    /// Elementwise (Hadamard) product of two same-shape tensors.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::shape(
                "mul",
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push_checked("mul", Tensor::new(shape, data)?, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: ValueId, factor: f64) -> Result<ValueId> {
        let f = E::from_f64(factor);
        let data: Vec<E> = self.value(x).data().iter().map(|&v| v * f).collect();
        let shape = self.value(x).shape().to_vec();
        self.push_checked("scale", Tensor::new(shape, data)?, Op::Scale { x, factor })
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        let data: Vec<E> = self.value(x).data().iter().map(|&v| gelu_fwd(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push_checked("gelu", Tensor::new(shape, data)?, Op::Gelu { x })
    }

    /// Layer normalization over the last axis followed by the affine
    /// transform `gamma * xhat + beta`.
    pub fn layernorm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let xshape = self.value(x).shape().to_vec();
        let d = *xshape.last().ok_or_else(|| {
            CoreError::shape("layernorm", "input must have at least one axis")
        })?;
        if self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(CoreError::shape(
                "layernorm",
                format!(
                    "gamma {:?} / beta {:?} vs feature dim {d}",
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let rows = self.value(x).numel() / d;
        let mut out = vec![E::ZERO; rows * d];
        let xdata = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        for r in 0..rows {
            let row = &xdata[r * d..(r + 1) * d];
            let (mean, rstd) = layernorm_row_stats(row);
            for j in 0..d {
                let xhat = (row[j] - mean) * rstd;
                out[r * d + j] = g[j] * xhat + b[j];
            }
        }
        self.push_checked(
            "layernorm",
            Tensor::new(xshape, out)?,
            Op::LayerNorm { x, gamma, beta },
        )
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: ValueId) -> Result<ValueId> {
        let xshape = self.value(x).shape().to_vec();
        let d = *xshape
            .last()
            .ok_or_else(|| CoreError::shape("softmax", "input must have at least one axis"))?;
        let rows = self.value(x).numel() / d;
        let xdata = self.value(x).data();
        let mut out = vec![E::ZERO; rows * d];
        for r in 0..rows {
            softmax_row(&xdata[r * d..(r + 1) * d], &mut out[r * d..(r + 1) * d]);
        }
        self.push_checked("softmax", Tensor::new(xshape, out)?, Op::Softmax { x })
    }

    /// Row-wise softmax over attention scores with a causal mask: query
    /// position `i` sees key positions `[i+1-window, i]` (all of `[0, i]`
    /// when no window is set). Masked entries get probability zero.
    pub fn causal_softmax(&mut self, x: ValueId, window: Option<usize>) -> Result<ValueId> {
        let xshape = self.value(x).shape().to_vec();
        let (_, t_q, t_k) = split_matrix_shape(&xshape).ok_or_else(|| {
            CoreError::shape("causal_softmax", format!("rank < 2: {xshape:?}"))
        })?;
        if t_q != t_k {
            return Err(CoreError::shape(
                "causal_softmax",
                format!("score block must be square, got {t_q}x{t_k}"),
            ));
        }
        if window == Some(0) {
            return Err(CoreError::Config {
                field: "attn_window",
                detail: "window must be at least 1".into(),
            });
        }
        let t = t_q;
        let blocks = self.value(x).numel() / (t * t);
        let xdata = self.value(x).data();
        let mut out = vec![E::ZERO; xdata.len()];
        for blk in 0..blocks {
            for i in 0..t {
                let lo = window.map_or(0, |w| i.saturating_sub(w - 1));
                let base = blk * t * t + i * t;
                let row = &xdata[base..base + t];
                // Max-subtracted exp over the visible span only.
                let mut maxv = row[lo];
                for &v in &row[lo..=i] {
                    maxv = maxv.maximum(v);
                }
                let mut denom = E::ZERO;
                for j in lo..=i {
                    let e = (row[j] - maxv).exp();
                    out[base + j] = e;
                    denom += e;
                }
                for j in lo..=i {
                    out[base + j] = out[base + j] / denom;
                }
            }
        }
        self.push_checked(
            "causal_softmax",
            Tensor::new(xshape, out)?,
            Op::CausalSoftmax { x },
        )
    }

    /// Row gather: output shape is `ids_shape ++ [d]` where the table is
    /// `[vocab, d]`.
    pub fn embedding(&mut self, table: ValueId, ids: &[u32], ids_shape: &[usize]) -> Result<ValueId> {
        let tshape = self.value(table).shape();
        if tshape.len() != 2 {
            return Err(CoreError::shape(
                "embedding",
                format!("table must be rank 2, got {tshape:?}"),
            ));
        }
        let (vocab, d) = (tshape[0], tshape[1]);
        let count: usize = ids_shape.iter().product();
        if count != ids.len() {
            return Err(CoreError::shape(
                "embedding",
                format!("ids_shape {ids_shape:?} vs {} ids", ids.len()),
            ));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab) {
            return Err(CoreError::usage(format!(
                "token id {bad} out of range for vocab {vocab}"
            )));
        }
        let tdata = self.value(table).data();
        let mut out = vec![E::ZERO; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            let src = id as usize * d;
            out[r * d..(r + 1) * d].copy_from_slice(&tdata[src..src + d]);
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(d);
        self.push_checked(
            "embedding",
            Tensor::new(out_shape, out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Mean cross-entropy between logits `[..., vocab]` and integer
    /// targets (one per leading position, `-1` marks padding that is
    /// excluded from the mean). Log-softmax is fused for stability.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[i64]) -> Result<ValueId> {
        let lshape = self.value(logits).shape().to_vec();
        let vocab = *lshape.last().ok_or_else(|| {
            CoreError::shape("cross_entropy", "logits must have at least one axis")
        })?;
        let rows = self.value(logits).numel() / vocab;
        if targets.len() != rows {
            return Err(CoreError::shape(
                "cross_entropy",
                format!("{rows} logit rows vs {} targets", targets.len()),
            ));
        }
        let ldata = self.value(logits).data();
        let mut total = E::ZERO;
        let mut valid = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            if t < 0 {
                continue;
            }
            let t = t as usize;
            if t >= vocab {
                return Err(CoreError::usage(format!(
                    "target {t} out of range for vocab {vocab}"
                )));
            }
            let row = &ldata[r * vocab..(r + 1) * vocab];
            total += log_sum_exp(row) - row[t];
            valid += 1;
        }
        if valid == 0 {
            return Err(CoreError::usage("cross_entropy: no non-padded targets"));
        }
        let mean = total * (E::ONE / E::from_f64(valid as f64));
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        )
    }

    pub fn transpose_last2(&mut self, x: ValueId) -> Result<ValueId> {
        let xshape = self.value(x).shape().to_vec();
        let (batch, r, c) = split_matrix_shape(&xshape)
            .ok_or_else(|| CoreError::shape("transpose", format!("rank < 2: {xshape:?}")))?;
        let nb: usize = batch.iter().product();
        let xdata = self.value(x).data();
        let mut out = vec![E::ZERO; xdata.len()];
        for blk in 0..nb {
            let base = blk * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = xdata[base + i * c + j];
                }
            }
        }
        let mut out_shape = batch.to_vec();
        out_shape.push(c);
        out_shape.push(r);
        self.push_checked(
            "transpose",
            Tensor::new(out_shape, out)?,
            Op::TransposeLast2 { x },
        )
    }

    /// Reorders axes: output axis `i` takes input axis `perm[i]`.
    pub fn permute(&mut self, x: ValueId, perm: &[usize]) -> Result<ValueId> {
        let xshape = self.value(x).shape().to_vec();
        if !is_permutation(perm, xshape.len()) {
            return Err(CoreError::shape(
                "permute",
                format!("perm {perm:?} is not a permutation of {} axes", xshape.len()),
            ));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| xshape[p]).collect();
        let out = permute_data(self.value(x).data(), &xshape, perm);
        self.push_checked(
            "permute",
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(CoreError::shape(
                "reshape",
                format!(
                    "cannot view {:?} as {shape:?}",
                    self.value(x).shape()
                ),
            ));
        }
        let data = self.value(x).data().to_vec();
        self.push_checked("reshape", Tensor::new(shape.to_vec(), data)?, Op::Reshape { x })
    }

    /// Total sum reduced to a scalar.
    pub fn sum(&mut self, x: ValueId) -> Result<ValueId> {
        let mut acc = E::ZERO;
        for &v in self.value(x).data() {
            acc += v;
        }
        self.push_checked("sum", Tensor::scalar(acc), Op::Sum { x })
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns a gradient per node that
    /// required one; leaves registered without requires-grad get none.
    pub fn backward(&self, loss: ValueId) -> Result<Gradients<E>> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(CoreError::usage(format!(
                "backward on non-scalar value of shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut slots: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        slots[loss.0] = Some(vec![E::ONE]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(grad) = slots[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &grad, &mut slots)?;
            slots[idx] = Some(grad);
        }
        Ok(Gradients { slots })
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn accumulate(slots: &mut [Option<Vec<E>>], id: ValueId, contrib: Vec<E>) {
        match &mut slots[id.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        grad: &[E],
        slots: &mut [Option<Vec<E>>],
    ) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (ashape, bshape) = (self.value(*a).shape(), self.value(*b).shape());
                let (abatch, m, k) = split_matrix_shape(ashape).unwrap();
                let (bbatch, _, n) = split_matrix_shape(bshape).unwrap();
                let nb: usize = abatch.iter().product();
                let broadcast_rhs = bbatch.is_empty();
                let b_stride = if broadcast_rhs { 0 } else { k * n };
                let adata = self.value(*a).data();
                let bdata = self.value(*b).data();
                if self.needs(*a) {
                    // dA = dC @ B^T
                    let mut da = vec![E::ZERO; adata.len()];
                    for batch in 0..nb {
                        let gbase = batch * m * n;
                        let bbase = batch * b_stride;
                        for i in 0..m {
                            for j in 0..n {
                                let gv = grad[gbase + i * n + j];
                                let arow = batch * m * k + i * k;
                                let bcol = bbase + j;
                                for p in 0..k {
                                    da[arow + p] += gv * bdata[bcol + p * n];
                                }
                            }
                        }
                    }
                    Self::accumulate(slots, *a, da);
                }
                if self.needs(*b) {
                    // dB = A^T @ dC, summed over the batch when broadcast.
                    let mut db = vec![E::ZERO; bdata.len()];
                    for batch in 0..nb {
                        let gbase = batch * m * n;
                        let bbase = batch * b_stride;
                        for i in 0..m {
                            let arow = batch * m * k + i * k;
                            for p in 0..k {
                                let av = adata[arow + p];
                                let dbrow = bbase + p * n;
                                for j in 0..n {
                                    db[dbrow + j] += av * grad[gbase + i * n + j];
                                }
                            }
                        }
                    }
                    Self::accumulate(slots, *b, db);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    Self::accumulate(slots, *a, grad.to_vec());
                }
                if self.needs(*b) {
                    Self::accumulate(slots, *b, grad.to_vec());
                }
            }
            Op::AddBias { x, bias } => {
                if self.needs(*x) {
                    Self::accumulate(slots, *x, grad.to_vec());
                }
                if self.needs(*bias) {
                    let bn = self.value(*bias).numel();
                    let mut db = vec![E::ZERO; bn];
                    for (i, &g) in grad.iter().enumerate() {
                        db[i % bn] += g;
                    }
                    Self::accumulate(slots, *bias, db);
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let da: Vec<E> = grad
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(&g, &bv)| g * bv)
                        .collect();
                    Self::accumulate(slots, *a, da);
                }
                if self.needs(*b) {
                    let db: Vec<E> = grad
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&g, &av)| g * av)
                        .collect();
                    Self::accumulate(slots, *b, db);
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    let f = E::from_f64(*factor);
                    Self::accumulate(slots, *x, grad.iter().map(|&g| g * f).collect());
                }
            }
            Op::Gelu { x } => {
                if self.needs(*x) {
                    let dx: Vec<E> = grad
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&g, &v)| g * gelu_bwd(v))
                        .collect();
                    Self::accumulate(slots, *x, dx);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = *self.value(*x).shape().last().unwrap();
                let rows = self.value(*x).numel() / d;
                let xdata = self.value(*x).data();
                let g = self.value(*gamma).data();
                let inv_d = E::ONE / E::from_f64(d as f64);
                let mut dx = if self.needs(*x) {
                    vec![E::ZERO; xdata.len()]
                } else {
                    Vec::new()
                };
                let mut dgamma = if self.needs(*gamma) {
                    vec![E::ZERO; d]
                } else {
                    Vec::new()
                };
                let mut dbeta = if self.needs(*beta) {
                    vec![E::ZERO; d]
                } else {
                    Vec::new()
                };
                for r in 0..rows {
                    let row = &xdata[r * d..(r + 1) * d];
                    let grow = &grad[r * d..(r + 1) * d];
                    let (mean, rstd) = layernorm_row_stats(row);
                    if !dgamma.is_empty() || !dbeta.is_empty() {
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            if !dgamma.is_empty() {
                                dgamma[j] += grow[j] * xhat;
                            }
                            if !dbeta.is_empty() {
                                dbeta[j] += grow[j];
                            }
                        }
                    }
                    if !dx.is_empty() {
                        // dx = rstd * (gy - mean(gy) - xhat * mean(gy * xhat))
                        let mut sum_gy = E::ZERO;
                        let mut sum_gy_xhat = E::ZERO;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let gy = grow[j] * g[j];
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                        }
                        let mean_gy = sum_gy * inv_d;
                        let mean_gy_xhat = sum_gy_xhat * inv_d;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let gy = grow[j] * g[j];
                            dx[r * d + j] = (gy - mean_gy - xhat * mean_gy_xhat) * rstd;
                        }
                    }
                }
                if !dx.is_empty() {
                    Self::accumulate(slots, *x, dx);
                }
                if !dgamma.is_empty() {
                    Self::accumulate(slots, *gamma, dgamma);
                }
                if !dbeta.is_empty() {
                    Self::accumulate(slots, *beta, dbeta);
                }
            }
            Op::Softmax { x } => {
                if self.needs(*x) {
                    let y = node.value.data();
                    let d = *node.value.shape().last().unwrap();
                    let rows = y.len() / d;
                    let mut dx = vec![E::ZERO; y.len()];
                    for r in 0..rows {
                        softmax_row_bwd(
                            &y[r * d..(r + 1) * d],
                            &grad[r * d..(r + 1) * d],
                            &mut dx[r * d..(r + 1) * d],
                        );
                    }
                    Self::accumulate(slots, *x, dx);
                }
            }
            Op::CausalSoftmax { x } => {
                if self.needs(*x) {
                    // Masked entries have y = 0, so the dense softmax
                    // jacobian leaves them at zero automatically.
                    let y = node.value.data();
                    let shape = node.value.shape();
                    let t = shape[shape.len() - 1];
                    let rows = y.len() / t;
                    let mut dx = vec![E::ZERO; y.len()];
                    for r in 0..rows {
                        softmax_row_bwd(
                            &y[r * t..(r + 1) * t],
                            &grad[r * t..(r + 1) * t],
                            &mut dx[r * t..(r + 1) * t],
                        );
                    }
                    Self::accumulate(slots, *x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.needs(*table) {
                    let d = self.value(*table).shape()[1];
                    let mut dt = vec![E::ZERO; self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = id as usize * d;
                        for j in 0..d {
                            dt[dst + j] += grad[r * d + j];
                        }
                    }
                    Self::accumulate(slots, *table, dt);
                }
            }
            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let vocab = *self.value(*logits).shape().last().unwrap();
                    let ldata = self.value(*logits).data();
                    let valid = targets.iter().filter(|&&t| t >= 0).count();
                    let scale = grad[0] * (E::ONE / E::from_f64(valid as f64));
                    let mut dl = vec![E::ZERO; ldata.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        if t < 0 {
                            continue;
                        }
                        let row = &ldata[r * vocab..(r + 1) * vocab];
                        let drow = &mut dl[r * vocab..(r + 1) * vocab];
                        softmax_row(row, drow);
                        for v in drow.iter_mut() {
                            *v = *v * scale;
                        }
                        drow[t as usize] = drow[t as usize] - scale;
                    }
                    Self::accumulate(slots, *logits, dl);
                }
            }
            Op::TransposeLast2 { x } => {
                if self.needs(*x) {
                    let shape = node.value.shape();
                    let (batch, r, c) = split_matrix_shape(shape).unwrap();
                    let nb: usize = batch.iter().product();
                    let mut dx = vec![E::ZERO; grad.len()];
                    for blk in 0..nb {
                        let base = blk * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                dx[base + j * r + i] = grad[base + i * c + j];
                            }
                        }
                    }
                    Self::accumulate(slots, *x, dx);
                }
            }
            Op::Permute { x, perm } => {
                if self.needs(*x) {
                    let inverse = invert_permutation(perm);
                    let dx = permute_data(grad, node.value.shape(), &inverse);
                    Self::accumulate(slots, *x, dx);
                }
            }
            Op::Reshape { x } => {
                if self.needs(*x) {
                    Self::accumulate(slots, *x, grad.to_vec());
                }
            }
            Op::Sum { x } => {
                if self.needs(*x) {
                    let g = grad[0];
                    Self::accumulate(slots, *x, vec![g; self.value(*x).numel()]);
                }
            }
        }
        Ok(())
    }
}

// ── Kernel helpers ──────────────────────────────────────────────────

fn gelu_fwd<E: Element>(x: E) -> E {
    let c = E::from_f64(libm::sqrt(2.0 / core::f64::consts::PI));
    let k = E::from_f64(GELU_COEF);
    let half = E::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (E::ONE + inner.tanh())
}

fn gelu_bwd<E: Element>(x: E) -> E {
    let c = E::from_f64(libm::sqrt(2.0 / core::f64::consts::PI));
    let k = E::from_f64(GELU_COEF);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = E::ONE - t * t;
    half * (E::ONE + t) + half * x * sech2 * c * (E::ONE + three * k * x * x)
}

fn layernorm_row_stats<E: Element>(row: &[E]) -> (E, E) {
    let inv_d = E::ONE / E::from_f64(row.len() as f64);
    let mut mean = E::ZERO;
    for &v in row {
        mean += v;
    }
    mean = mean * inv_d;
    let mut var = E::ZERO;
    for &v in row {
        let d = v - mean;
        var += d * d;
    }
    var = var * inv_d;
    let rstd = E::ONE / (var + E::from_f64(LAYERNORM_EPS)).sqrt();
    (mean, rstd)
}

fn softmax_row<E: Element>(row: &[E], out: &mut [E]) {
    let mut maxv = row[0];
    for &v in row {
        maxv = maxv.maximum(v);
    }
    let mut denom = E::ZERO;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - maxv).exp();
        *o = e;
        denom += e;
    }
    for o in out.iter_mut() {
        *o = *o / denom;
    }
}

fn softmax_row_bwd<E: Element>(y: &[E], grad: &[E], dx: &mut [E]) {
    let mut dot = E::ZERO;
    for (&g, &yv) in grad.iter().zip(y) {
        dot += g * yv;
    }
    for ((d, &g), &yv) in dx.iter_mut().zip(grad).zip(y) {
        *d = yv * (g - dot);
    }
}

fn log_sum_exp<E: Element>(row: &[E]) -> E {
    let mut maxv = row[0];
    for &v in row {
        maxv = maxv.maximum(v);
    }
    let mut acc = E::ZERO;
    for &v in row {
        acc += (v - maxv).exp();
    }
    maxv + acc.ln()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Rearranges `data` (laid out as `in_shape`) so that output axis `i`
/// corresponds to input axis `perm[i]`.
fn permute_data<E: Element>(data: &[E], in_shape: &[usize], perm: &[usize]) -> Vec<E> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![data[0]; data.len()];
    for (out_flat, slot) in out.iter_mut().enumerate() {
        let mut in_flat = 0;
        let mut rem = out_flat;
        for (axis, &os) in out_strides.iter().enumerate() {
            let idx = rem / os;
            rem %= os;
            in_flat += idx * in_strides[perm[axis]];
        }
        *slot = data[in_flat];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn leaf64(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> ValueId {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad()).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2], vec![0.0, 0.0]);
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_constant_row_is_zero_before_affine() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![4], vec![3.0; 4]);
        let g = tape
            .constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap())
            .unwrap();
        let b = tape
            .constant(Tensor::new(vec![4], vec![0.0; 4]).unwrap())
            .unwrap();
        let y = tape.layernorm(x, g, b).unwrap();
        for &v in tape.value(y).data() {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn cross_entropy_closed_form() {
        // logits [ln 1, ln 3], target 1 -> -ln(3/4), frozen from an
        // independent high-precision evaluation.
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2], vec![0.0, 3.0f64.ln()]);
        let loss = tape.cross_entropy(x, &[1]).unwrap();
        let expected = 0.2876820724517809;
        assert!((tape.value(loss).item().unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_ignores_padding() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2, 2], vec![0.0, 3.0f64.ln(), 9.0, -4.0]);
        let loss = tape.cross_entropy(x, &[1, -1]).unwrap();
        assert!((tape.value(loss).item().unwrap() - 0.2876820724517809).abs() < 1e-15);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]);
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn dot_product_gradient() {
        // loss = <w, w> at w = [1, 2] -> gradient [2, 4]
        let mut tape = Tape::<f64>::new();
        let w = leaf64(&mut tape, vec![2], vec![1.0, 2.0]);
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(x + x): every slot gets gradient 2.
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![3], vec![0.3, -1.0, 2.0]);
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.sum(doubled).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_on_non_scalar_is_usage_error() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(matches!(tape.backward(x), Err(CoreError::Usage(_))));
    }

    #[test]
    fn frozen_leaf_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut tape = Tape::<f64>::new();
        let a = leaf64(&mut tape, vec![2, 3], vec![0.0; 6]);
        let b = leaf64(&mut tape, vec![2, 2], vec![0.0; 4]);
        match tape.matmul(a, b) {
            Err(CoreError::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_forward_is_reported() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![1], vec![1e308]);
        let doubled = tape.add(x, x);
        assert!(matches!(doubled, Err(CoreError::NumericalFault { .. })));
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![3, 3], vec![1.0; 9]);
        let y = tape.causal_softmax(x, None).unwrap();
        let d = tape.value(y).data();
        // Row 0 sees only itself.
        assert_eq!(&d[0..3], &[1.0, 0.0, 0.0]);
        // Row 1 splits evenly over two visible keys.
        assert_eq!(&d[3..6], &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn windowed_softmax_masks_past_beyond_span() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![3, 3], vec![1.0; 9]);
        let y = tape.causal_softmax(x, Some(2)).unwrap();
        let d = tape.value(y).data();
        // Row 2 sees keys 1 and 2 only.
        assert_eq!(&d[6..9], &[0.0, 0.5, 0.5]);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::<f64>::new();
        let table = leaf64(&mut tape, vec![4, 2], vec![0.0; 8]);
        assert!(matches!(
            tape.embedding(table, &[4], &[1]),
            Err(CoreError::Usage(_))
        ));
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = leaf64(
                &mut tape,
                vec![2, 3],
                vec![0.11, -0.77, 1.3, 2.9, -0.01, 0.44],
            );
            let w = leaf64(&mut tape, vec![3, 2], vec![0.4, -1.0, 2.2, 0.9, -0.3, 0.05]);
            let h = tape.matmul(x, w).unwrap();
            let a = tape.gelu(h).unwrap();
            let s = tape.softmax(a).unwrap();
            let loss = tape.sum(s).unwrap();
            tape.value(loss).item().unwrap().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn permute_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let x = leaf64(&mut tape, vec![2, 3, 4], (0..24).map(|i| i as f64).collect());
        let p = tape.permute(x, &[1, 2, 0]).unwrap();
        let back = tape.permute(p, &[2, 0, 1]).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(x).data());
        assert_eq!(tape.value(p).shape(), &[3, 4, 2]);
    }
}
