//! Reverse-mode gradient tape.
//!
//! Operations execute eagerly and append one node each, so insertion order
//! is a topological order of the forward graph; `backward` walks the nodes
//! in exact reverse. Every kernel output is checked finite — NaN/Inf raise
//! an error instead of propagating.

use super::kernels::{self, matmul_threaded, transpose};
use super::rng::DropoutKey;
use super::{Scalar, Tensor};
use crate::error::{CoreError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, factor: T },
    Transpose { a: NodeId },
    SliceRows { a: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize },
    ConcatCols { parts: Vec<NodeId> },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, mean: Vec<T>, rstd: Vec<T> },
    SoftmaxRows { x: NodeId },
    Gelu { x: NodeId },
    GatherRows { table: NodeId, ids: Vec<usize> },
    Dropout { x: NodeId, kept: Vec<bool>, scale: T },
    Sum { x: NodeId },
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        smoothing: T,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

/// Recorded forward computation. One tape per thread; tensors are immutable
/// once produced.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    dropout_key: Option<(u64, u64)>, // (seed, step)
    dropout_calls: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), consumed: false, dropout_key: None, dropout_calls: 0 }
    }

    /// Tape whose dropout masks derive from `(seed, layer index, step)`;
    /// the layer index is the dropout call counter within this tape.
    pub fn with_dropout(seed: u64, step: u64) -> Self {
        Self { nodes: Vec::new(), consumed: false, dropout_key: Some((seed, step)), dropout_calls: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, name: &'static str) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Leaf, value, "leaf")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(CoreError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner extents disagree: [{m},{ka}] x [{kb},{n}]"),
            });
        }
        let mut out = Tensor::zeros(vec![m, n]);
        matmul_threaded(self.value(a).data(), self.value(b).data(), out.data_mut(), m, ka, n);
        self.push(Op::Matmul { a, b }, out, "matmul")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(Op::Add { a, b }, out, "add")
    }

    /// Broadcast-add a length-`c` bias vector to every row of a `[r,c]` matrix.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.value(a).dims2("add_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {:?} vs row width {}", self.value(bias).shape(), c),
            });
        }
        let bias_data = self.value(bias).data().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bias_data[i % c])
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(Op::AddBias { a, bias }, out, "add_bias")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(CoreError::ShapeMismatch {
                op: "mul",
                detail: format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let data =
            self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(Op::Mul { a, b }, out, "mul")
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let f = T::from_f64(factor);
        let data = self.value(a).data().iter().map(|&x| x * f).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        self.push(Op::Scale { a, factor: f }, out, "scale")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let mut out = Tensor::zeros(vec![c, r]);
        transpose(self.value(a).data(), out.data_mut(), r, c);
        self.push(Op::Transpose { a }, out, "transpose")
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2("slice_rows")?;
        if start + len > r {
            return Err(CoreError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {start}..{} out of {r}", start + len),
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::new(vec![len, c], data)?;
        self.push(Op::SliceRows { a, start }, out, "slice_rows")
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::ShapeMismatch { op: "concat_rows", detail: "no parts".into() });
        }
        let (_, c) = self.value(parts[0]).dims2("concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.value(p).dims2("concat_rows")?;
            if pc != c {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column widths disagree: {pc} vs {c}"),
                });
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        self.push(Op::ConcatRows { parts: parts.to_vec() }, out, "concat_rows")
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.value(a).dims2("slice_cols")?;
        if start + len > c {
            return Err(CoreError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("cols {start}..{} out of {c}", start + len),
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        self.push(Op::SliceCols { a, start }, out, "slice_cols")
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(CoreError::ShapeMismatch { op: "concat_cols", detail: "no parts".into() });
        }
        let (r, _) = self.value(parts[0]).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2("concat_cols")?;
            if pr != r {
                return Err(CoreError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts disagree: {pr} vs {r}"),
                });
            }
            widths.push(pc);
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        self.push(Op::ConcatCols { parts: parts.to_vec() }, out, "concat_cols")
    }

    /// Row-wise layer normalization with learnable gain/shift.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2("layernorm")?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(CoreError::ShapeMismatch {
                op: "layernorm",
                detail: format!(
                    "gamma {:?} / beta {:?} vs row width {}",
                    self.value(gamma).shape(),
                    self.value(beta).shape(),
                    c
                ),
            });
        }
        let eps = T::from_f64(1e-5);
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut out = vec![T::zero(); r * c];
        let mut means = vec![T::zero(); r];
        let mut rstds = vec![T::zero(); r];
        {
            let xs = self.value(x).data();
            let g = self.value(gamma).data();
            let b = self.value(beta).data();
            for i in 0..r {
                let row = &xs[i * c..(i + 1) * c];
                let mean = row.iter().copied().sum::<T>() * inv_c;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                let rstd = (var + eps).sqrt().recip();
                means[i] = mean;
                rstds[i] = rstd;
                for j in 0..c {
                    out[i * c + j] = (row[j] - mean) * rstd * g[j] + b[j];
                }
            }
        }
        let out = Tensor::new(vec![r, c], out)?;
        self.push(Op::LayerNorm { x, gamma, beta, mean: means, rstd: rstds }, out, "layernorm")
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2("softmax_rows")?;
        let mut data = self.value(x).data().to_vec();
        kernels::softmax_rows_inplace(&mut data, r, c);
        let out = Tensor::new(vec![r, c], data)?;
        self.push(Op::SoftmaxRows { x }, out, "softmax_rows")
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let data = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(Op::Gelu { x }, out, "gelu")
    }

    /// Select rows of `table` by index (embedding lookup). Backward
    /// scatter-adds into the table gradient.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, c) = self.value(table).dims2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(CoreError::TokenOutOfRange { id: bad as u32, vocab: v });
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        self.push(Op::GatherRows { table, ids: ids.to_vec() }, out, "gather_rows")
    }

    /// Inverted dropout with a counter-based mask. `rate == 0` is an alias
    /// for the input. Requires the tape to have a dropout key.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(CoreError::InvalidConfig(format!("dropout rate {rate} outside [0,1)")));
        }
        let (seed, step) = self.dropout_key.ok_or_else(|| {
            CoreError::InvalidConfig("dropout requested on a tape without a dropout key".into())
        })?;
        let layer = self.dropout_calls;
        self.dropout_calls += 1;
        let key = DropoutKey { seed, layer, step };
        let scale = T::from_f64(1.0 / (1.0 - rate));
        let kept: Vec<bool> =
            (0..self.value(x).len()).map(|e| key.keeps(e as u64, rate)).collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&kept)
            .map(|(&v, &k)| if k { v * scale } else { T::zero() })
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data)?;
        self.push(Op::Dropout { x, kept, scale }, out, "dropout")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Op::Sum { x }, Tensor::scalar(total), "sum")
    }

    /// Mean label-smoothed cross-entropy over masked rows of `[n,k]` logits.
    /// Unmasked rows contribute exactly zero, to the loss and its gradient.
    pub fn masked_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[bool],
        smoothing: f64,
    ) -> Result<NodeId> {
        let (n, k) = self.value(logits).dims2("masked_cross_entropy")?;
        if targets.len() != n || mask.len() != n {
            return Err(CoreError::ShapeMismatch {
                op: "masked_cross_entropy",
                detail: format!("targets/mask length vs {n} rows"),
            });
        }
        let masked = mask.iter().filter(|&&m| m).count();
        if masked == 0 {
            return Err(CoreError::EmptyMask);
        }
        if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= k) {
            return Err(CoreError::TokenOutOfRange { id: bad, vocab: k });
        }
        let eps = T::from_f64(smoothing);
        let uniform = eps * T::from_f64(1.0 / k as f64);
        let confident = T::one() - eps;
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = &xs[i * k..(i + 1) * k];
            let mut max = T::neg_infinity();
            for &v in row {
                max = max.max(v);
            }
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[i * k + j] = e;
                sum = sum + e;
            }
            let lse = max + sum.ln();
            for p in &mut probs[i * k..(i + 1) * k] {
                *p = *p / sum;
            }
            // -( (1-eps) log p_t + eps/k * sum_j log p_j )
            let mut row_loss = -confident * (row[targets[i] as usize] - lse);
            if smoothing > 0.0 {
                let sum_logp = row.iter().map(|&v| v - lse).sum::<T>();
                row_loss = row_loss - uniform * sum_logp;
            }
            total = total + row_loss;
        }
        let loss = total * T::from_f64(1.0 / masked as f64);
        let probs = Tensor::new(vec![n, k], probs)?;
        self.push(
            Op::MaskedCrossEntropy {
                logits,
                targets: targets.iter().map(|&t| t as usize).collect(),
                mask: mask.to_vec(),
                smoothing: eps,
                probs,
            },
            Tensor::scalar(loss),
            "masked_cross_entropy",
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the recorded graph; a
    /// second call without re-recording is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(CoreError::DoubleBackward);
        }
        self.consumed = true;
        let loss_value = self.value(loss);
        if !loss_value.is_scalar() {
            return Err(CoreError::NonScalarLoss { shape: loss_value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            if !grad.all_finite() {
                return Err(CoreError::NonFinite { op: "backward" });
            }
            // Leaves keep their gradient; interior nodes propagate and drop it.
            let keep = matches!(self.nodes[idx].op, Op::Leaf);
            self.propagate(idx, &grad, &mut grads)?;
            if keep {
                grads[idx] = Some(grad);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(
        &self,
        idx: usize,
        grad: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let accumulate = |grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e = *e + *d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.value(*b).shape()[1];
                // dA = dC . B^T
                let mut bt = vec![T::zero(); k * n];
                transpose(self.value(*b).data(), &mut bt, k, n);
                let mut da = Tensor::zeros(vec![m, k]);
                matmul_threaded(grad.data(), &bt, da.data_mut(), m, n, k);
                // dB = A^T . dC
                let mut at = vec![T::zero(); m * k];
                transpose(self.value(*a).data(), &mut at, m, k);
                let mut db = Tensor::zeros(vec![k, n]);
                matmul_threaded(&at, grad.data(), db.data_mut(), k, m, n);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Add { a, b } => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.clone());
            }
            Op::AddBias { a, bias } => {
                let c = self.value(*bias).len();
                let mut db = Tensor::zeros(vec![c]);
                for (i, &g) in grad.data().iter().enumerate() {
                    let slot = &mut db.data_mut()[i % c];
                    *slot = *slot + g;
                }
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *bias, db);
            }
            Op::Mul { a, b } => {
                let da: Vec<T> =
                    grad.data().iter().zip(self.value(*b).data()).map(|(&g, &v)| g * v).collect();
                let db: Vec<T> =
                    grad.data().iter().zip(self.value(*a).data()).map(|(&g, &v)| g * v).collect();
                accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), da)?);
                accumulate(grads, *b, Tensor::new(grad.shape().to_vec(), db)?);
            }
            Op::Scale { a, factor } => {
                let da: Vec<T> = grad.data().iter().map(|&g| g * *factor).collect();
                accumulate(grads, *a, Tensor::new(grad.shape().to_vec(), da)?);
            }
            Op::Transpose { a } => {
                let (r, c) = self.value(*a).dims2("transpose")?;
                let mut da = Tensor::zeros(vec![r, c]);
                transpose(grad.data(), da.data_mut(), c, r);
                accumulate(grads, *a, da);
            }
            Op::SliceRows { a, start } => {
                let (r, c) = self.value(*a).dims2("slice_rows")?;
                let rows = grad.shape()[0];
                let mut da = Tensor::zeros(vec![r, c]);
                da.data_mut()[start * c..(start + rows) * c].copy_from_slice(grad.data());
                accumulate(grads, *a, da);
            }
            Op::ConcatRows { parts } => {
                let c = grad.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).shape()[0];
                    let part =
                        grad.data()[offset * c..(offset + rows) * c].to_vec();
                    accumulate(grads, p, Tensor::new(vec![rows, c], part)?);
                    offset += rows;
                }
            }
            Op::SliceCols { a, start } => {
                let (r, c) = self.value(*a).dims2("slice_cols")?;
                let w = grad.shape()[1];
                let mut da = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    da.data_mut()[i * c + start..i * c + start + w]
                        .copy_from_slice(&grad.data()[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, da);
            }
            Op::ConcatCols { parts } => {
                let r = grad.shape()[0];
                let total = grad.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut part = Tensor::zeros(vec![r, w]);
                    for i in 0..r {
                        part.data_mut()[i * w..(i + 1) * w]
                            .copy_from_slice(&grad.data()[i * total + offset..i * total + offset + w]);
                    }
                    accumulate(grads, p, part);
                    offset += w;
                }
            }
            Op::LayerNorm { x, gamma, beta, mean, rstd } => {
                let (r, c) = self.value(*x).dims2("layernorm")?;
                let xs = self.value(*x).data();
                let g = self.value(*gamma).data();
                let inv_c = T::from_f64(1.0 / c as f64);
                let mut dx = Tensor::zeros(vec![r, c]);
                let mut dgamma = Tensor::zeros(vec![c]);
                let mut dbeta = Tensor::zeros(vec![c]);
                for i in 0..r {
                    let row_x = &xs[i * c..(i + 1) * c];
                    let row_dy = &grad.data()[i * c..(i + 1) * c];
                    let (mu, s) = (mean[i], rstd[i]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let h = (row_x[j] - mu) * s;
                        let gy = row_dy[j] * g[j];
                        m1 = m1 + gy;
                        m2 = m2 + gy * h;
                        dgamma.data_mut()[j] = dgamma.data_mut()[j] + row_dy[j] * h;
                        dbeta.data_mut()[j] = dbeta.data_mut()[j] + row_dy[j];
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    for j in 0..c {
                        let h = (row_x[j] - mu) * s;
                        let gy = row_dy[j] * g[j];
                        dx.data_mut()[i * c + j] = s * (gy - m1 - h * m2);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::SoftmaxRows { x } => {
                let y = &self.nodes[idx].value;
                let (r, c) = y.dims2("softmax_rows")?;
                let mut dx = Tensor::zeros(vec![r, c]);
                for i in 0..r {
                    let row_y = &y.data()[i * c..(i + 1) * c];
                    let row_dy = &grad.data()[i * c..(i + 1) * c];
                    let dot: T = row_y.iter().zip(row_dy).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        dx.data_mut()[i * c + j] = row_y[j] * (row_dy[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gelu { x } => {
                let dx: Vec<T> = grad
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&g, &v)| g * kernels::gelu_derivative(v))
                    .collect();
                accumulate(grads, *x, Tensor::new(grad.shape().to_vec(), dx)?);
            }
            Op::GatherRows { table, ids } => {
                let (v, c) = self.value(*table).dims2("gather_rows")?;
                let mut dt = Tensor::zeros(vec![v, c]);
                for (row, &id) in ids.iter().enumerate() {
                    let src = &grad.data()[row * c..(row + 1) * c];
                    let dst = &mut dt.data_mut()[id * c..(id + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::Dropout { x, kept, scale } => {
                let dx: Vec<T> = grad
                    .data()
                    .iter()
                    .zip(kept)
                    .map(|(&g, &k)| if k { g * *scale } else { T::zero() })
                    .collect();
                accumulate(grads, *x, Tensor::new(grad.shape().to_vec(), dx)?);
            }
            Op::Sum { x } => {
                let g = grad.scalar_value()?;
                let dx = vec![g; self.value(*x).len()];
                accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
            }
            Op::MaskedCrossEntropy { logits, targets, mask, smoothing, probs } => {
                let g = grad.scalar_value()?;
                let (n, k) = probs.dims2("masked_cross_entropy")?;
                let masked = mask.iter().filter(|&&m| m).count();
                let coeff = g * T::from_f64(1.0 / masked as f64);
                let uniform = *smoothing * T::from_f64(1.0 / k as f64);
                let confident = T::one() - *smoothing;
                let mut dl = Tensor::zeros(vec![n, k]);
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    for j in 0..k {
                        let mut q = uniform;
                        if j == targets[i] {
                            q = q + confident;
                        }
                        dl.data_mut()[i * k + j] = coeff * (probs.data()[i * k + j] - q);
                    }
                }
                accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: Vec<usize>, vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, vals).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(tensor(vec![2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 4.0])).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient_is_2p() {
        let vals = [1.0, -2.0, 3.0, 0.5];
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(tensor(vec![2, 2], &vals)).unwrap();
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (g, v) in grads.get(p).unwrap().data().iter().zip(vals) {
            assert!((g - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(tensor(vec![1], &[2.0])).unwrap();
        let loss = tape.sum(p).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(CoreError::DoubleBackward)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let p = tape.leaf(tensor(vec![2], &[1.0, 2.0])).unwrap();
        assert!(matches!(tape.backward(p), Err(CoreError::NonScalarLoss { .. })));
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(CoreError::ShapeMismatch { .. })));
    }

    #[test]
    fn nan_input_rejected_not_propagated() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            tape.leaf(Tensor::new(vec![1], vec![f64::NAN]).unwrap()),
            Err(CoreError::NonFinite { .. })
        ));
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let k = 64;
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![4, k])).unwrap();
        let targets = [3u32, 7, 0, 63];
        let mask = [true, true, false, true];
        let loss = tape.masked_cross_entropy(logits, &targets, &mask, 0.0).unwrap();
        let got = tape.value(loss).scalar_value().unwrap();
        assert!((got - (k as f64).ln()).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn cross_entropy_ignores_unmasked_rows_bit_exactly() {
        let k = 8;
        let targets = [1u32, 2, 3];
        let mask = [false, true, false];
        let mut base = vec![0.1; 3 * k];
        let mut run = |logits: Vec<f64>| {
            let mut tape = Tape::<f64>::new();
            let l = tape.leaf(tensor(vec![3, k], &logits)).unwrap();
            let loss = tape.masked_cross_entropy(l, &targets, &mask, 0.1).unwrap();
            tape.value(loss).scalar_value().unwrap()
        };
        let a = run(base.clone());
        // Perturb unmasked rows only.
        for j in 0..k {
            base[j] += 17.5;
            base[2 * k + j] -= 3.25;
        }
        let b = run(base);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let l = tape.leaf(Tensor::zeros(vec![2, 4])).unwrap();
        assert!(matches!(
            tape.masked_cross_entropy(l, &[0, 0], &[false, false], 0.0),
            Err(CoreError::EmptyMask)
        ));
    }

    #[test]
    fn perfect_prediction_zero_loss() {
        let mut tape = Tape::<f64>::new();
        // Huge margin puts probability ~1 on the target.
        let mut vals = vec![0.0; 2 * 4];
        vals[2] = 200.0;
        vals[4 + 1] = 200.0;
        let l = tape.leaf(tensor(vec![2, 4], &vals)).unwrap();
        let loss = tape.masked_cross_entropy(l, &[2, 1], &[true, true], 0.0).unwrap();
        assert!(tape.value(loss).scalar_value().unwrap().abs() < 1e-12);
    }

    #[test]
    fn dropout_deterministic_given_key() {
        let run = || {
            let mut tape = Tape::<f32>::with_dropout(9, 4);
            let x = tape.leaf(Tensor::new(vec![4, 8], vec![1.0f32; 32]).unwrap()).unwrap();
            let d = tape.dropout(x, 0.5).unwrap();
            tape.value(d).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_without_key_errors() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0f32; 2]).unwrap()).unwrap();
        assert!(tape.dropout(x, 0.5).is_err());
        // rate 0 is always fine
        assert!(tape.dropout(x, 0.0).is_ok());
    }
}
