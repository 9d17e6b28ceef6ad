//! Tape-based reverse-mode automatic differentiation.
//!
//! Forward operations execute eagerly and append a node describing the op
//! and its operands; [`Tape::backward`] walks the recording in reverse and
//! accumulates gradients into per-node buffers. Nodes are append-only, so a
//! node's operands always precede it and one reverse sweep suffices.
//!
//! Gradients of interior nodes are freed as soon as they have been
//! propagated; only leaf gradients survive the sweep. All reductions run in
//! a fixed order, so identical recordings produce bit-identical gradients.

use rand::Rng;

use super::{matmul_acc, matmul_at_acc, matmul_bt_acc, sigmoid, softplus, Tensor, TensorError};

/// Epsilon added to batch variance before the inverse square root.
pub const BN_EPSILON: f64 = 1e-5;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Per-feature batch statistics reported by the training-mode batch norm,
/// used by callers to maintain running estimates for inference.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    /// `c = a @ b`
    Matmul { a: NodeId, b: NodeId },
    /// `y = x @ w^T (+ bias)`; `x: [n, in]`, `w: [out, in]`, `bias: [out]`
    Linear {
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Sigmoid { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    /// Concatenation along the last axis.
    ConcatLast { a: NodeId, b: NodeId },
    /// Reversal along the time axis (second-to-last).
    ReverseTime { x: NodeId },
    /// `[batch, time, d] -> [batch, d]` at a fixed step.
    SliceTime { x: NodeId, t: usize },
    /// Inverse of repeated `SliceTime`: `T x [batch, d] -> [batch, T, d]`.
    StackTime { parts: Vec<NodeId> },
    /// Column range `[c0, c1)` of a rank-2 tensor.
    SliceCols { x: NodeId, c0: usize, c1: usize },
    Reshape { x: NodeId },
    SumAll { x: NodeId },
    /// Sum of squared elements, the building block of weight decay.
    SumSq { x: NodeId },
    BatchNormTrain {
        x: NodeId,
        alpha: NodeId,
        beta: NodeId,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
    BatchNormInfer {
        x: NodeId,
        alpha: NodeId,
        beta: NodeId,
        x_hat: Tensor,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: NodeId,
        mask: Vec<bool>,
        keep: f64,
    },
    /// Mean element-wise sigmoid cross-entropy against fixed targets.
    SigmoidCeMean { logits: NodeId, targets: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// An autodiff recording. Create one per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Registers an independent input. Its gradient is retained by
    /// [`Tape::backward`] and readable through [`Tape::grad`].
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// The tensor computed at `id`.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the most recent backward target with respect to `id`.
    /// `None` before backward or for interior nodes (freed eagerly).
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Smallest `|x|` seen by any ReLU input on this tape, if any ReLU was
    /// recorded. Finite-difference harnesses use this to detect recordings
    /// that sit numerically on the activation kink.
    pub fn relu_min_abs_input(&self) -> Option<f64> {
        let mut min: Option<f64> = None;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for v in self.nodes[x.0].value.data() {
                    let a = v.abs();
                    if min.map_or(true, |m| a < m) {
                        min = Some(a);
                    }
                }
            }
        }
        min
    }

    fn rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(TensorError::RankMismatch {
                op,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        Ok((s[0], s[1]))
    }

    /// `a @ b` for rank-2 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (m, ka) = self.rank2("matmul", a)?;
        let (kb, n) = self.rank2("matmul", b)?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_acc(
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
            m,
            ka,
            n,
        );
        Ok(self.push(out, Op::Matmul { a, b }))
    }

    /// Affine map `x @ w^T + bias` with `x: [n, in]`, `w: [out, in]`.
    ///
    /// The transposed weight layout keeps each output's weights contiguous,
    /// and the bias joins after the full dot product so the reduction order
    /// is identical however the caller assembled `x`.
    pub fn linear(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let (n, k) = self.rank2("linear", x)?;
        let (out, kw) = self.rank2("linear", w)?;
        if k != kw {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        if let Some(b) = bias {
            let bs = self.value(b).shape();
            if bs != [out] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: self.value(w).shape().to_vec(),
                    rhs: bs.to_vec(),
                });
            }
        }
        let mut y = Tensor::zeros(&[n, out]);
        matmul_bt_acc(
            self.value(x).data(),
            self.value(w).data(),
            y.data_mut(),
            n,
            k,
            out,
        );
        if let Some(b) = bias {
            let bd = self.value(b).data().to_vec();
            for row in y.data_mut().chunks_exact_mut(out) {
                for (yj, bj) in row.iter_mut().zip(&bd) {
                    *yj += bj;
                }
            }
        }
        Ok(self.push(y, Op::Linear { x, w, bias }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += v;
        }
        Ok(self.push(out, Op::Add { a, b }))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= v;
        }
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, TensorError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o *= c;
        }
        Ok(self.push(out, Op::Scale { x, c }))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = sigmoid(*o);
        }
        Ok(self.push(out, Op::Sigmoid { x }))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            *o = o.tanh();
        }
        Ok(self.push(out, Op::Tanh { x }))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let mut out = self.value(x).clone();
        for o in out.data_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
        Ok(self.push(out, Op::Relu { x }))
    }

    /// Concatenates two tensors along their last axis; all leading
    /// dimensions must agree.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa.len() != sb.len()
            || sa.is_empty()
            || sa[..sa.len() - 1] != sb[..sb.len() - 1]
        {
            return Err(TensorError::ShapeMismatch {
                op: "concat_last",
                lhs: sa,
                rhs: sb,
            });
        }
        let (la, lb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = la + lb;
        let mut data = Vec::with_capacity(rows * (la + lb));
        let da = self.value(a).data();
        let db = self.value(b).data();
        for r in 0..rows {
            data.extend_from_slice(&da[r * la..(r + 1) * la]);
            data.extend_from_slice(&db[r * lb..(r + 1) * lb]);
        }
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatLast { a, b }))
    }

    /// Reverses the time axis (second-to-last) of a rank-2 or rank-3 tensor.
    pub fn reverse_time(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(TensorError::RankMismatch {
                op: "reverse_time",
                expected: 2,
                shape: s,
            });
        }
        let out = reverse_time_tensor(self.value(x));
        Ok(self.push(out, Op::ReverseTime { x }))
    }

    /// Extracts time step `t` from `[batch, time, d]`, yielding `[batch, d]`.
    pub fn slice_time(&mut self, x: NodeId, t: usize) -> Result<NodeId, TensorError> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(TensorError::RankMismatch {
                op: "slice_time",
                expected: 3,
                shape: s,
            });
        }
        let (b, time, d) = (s[0], s[1], s[2]);
        if t >= time {
            return Err(TensorError::Invalid {
                op: "slice_time",
                msg: format!("step {t} out of range for {time} steps"),
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(b * d);
        for bi in 0..b {
            let off = (bi * time + t) * d;
            data.extend_from_slice(&src[off..off + d]);
        }
        let out = Tensor::new(vec![b, d], data)?;
        Ok(self.push(out, Op::SliceTime { x, t }))
    }

    /// Stacks `T` equally-shaped `[batch, d]` tensors into `[batch, T, d]`.
    pub fn stack_time(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "stack_time",
                msg: "no time steps given".into(),
            });
        }
        let (b, d) = self.rank2("stack_time", parts[0])?;
        for &p in parts {
            if self.value(p).shape() != [b, d] {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_time",
                    lhs: vec![b, d],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let t = parts.len();
        let mut data = vec![0.0; b * t * d];
        for (ti, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for bi in 0..b {
                let dst = (bi * t + ti) * d;
                data[dst..dst + d].copy_from_slice(&src[bi * d..(bi + 1) * d]);
            }
        }
        let out = Tensor::new(vec![b, t, d], data)?;
        Ok(self.push(
            out,
            Op::StackTime {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Column range `[c0, c1)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, c0: usize, c1: usize) -> Result<NodeId, TensorError> {
        let (n, d) = self.rank2("slice_cols", x)?;
        if c0 >= c1 || c1 > d {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {c0}..{c1} invalid for {d} columns"),
            });
        }
        let w = c1 - c0;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * w);
        for r in 0..n {
            data.extend_from_slice(&src[r * d + c0..r * d + c1]);
        }
        let out = Tensor::new(vec![n, w], data)?;
        Ok(self.push(out, Op::SliceCols { x, c0, c1 }))
    }

    /// Reinterprets `x` with a new shape of equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let out = self.value(x).reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll { x }))
    }

    /// Sum of squared elements, as a `[1]` tensor.
    pub fn sum_sq(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        Ok(self.push(Tensor::scalar(s), Op::SumSq { x }))
    }

    /// Inverted dropout: each element independently survives with
    /// probability `keep` and is scaled by `1/keep`, so activations keep
    /// their expected magnitude and inference needs no rescaling.
    pub fn dropout<R: Rng>(
        &mut self,
        x: NodeId,
        keep: f64,
        rng: &mut R,
    ) -> Result<NodeId, TensorError> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(TensorError::Invalid {
                op: "dropout",
                msg: format!("keep probability {keep} outside (0, 1]"),
            });
        }
        let n = self.value(x).len();
        let mask: Vec<bool> = (0..n).map(|_| rng.gen::<f64>() < keep).collect();
        let inv = 1.0 / keep;
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o = if m { *o * inv } else { 0.0 };
        }
        Ok(self.push(out, Op::Dropout { x, mask, keep }))
    }

    /// Training-mode batch normalisation over a `[n, features]` tensor.
    ///
    /// Normalises each feature by the population statistics of the current
    /// batch, then applies the learned per-feature scale `alpha` and shift
    /// `beta`. Returns the batch statistics so the caller can update its
    /// running estimates. Requires `n >= 2`; a single-row batch has zero
    /// variance everywhere and would normalise to pure noise.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        alpha: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BatchStats), TensorError> {
        let (n, f) = self.rank2("batch_norm", x)?;
        self.check_bn_params("batch_norm", f, alpha, beta)?;
        if n < 2 {
            return Err(TensorError::Invalid {
                op: "batch_norm",
                msg: format!("need at least 2 rows to estimate batch statistics, got {n}"),
            });
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0; f];
        for row in xd.chunks_exact(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut var = vec![0.0; f];
        for row in xd.chunks_exact(f) {
            for ((vv, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *vv += d * d;
            }
        }
        for vv in &mut var {
            *vv /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut x_hat = Tensor::zeros(&[n, f]);
        for (xrow, hrow) in xd
            .chunks_exact(f)
            .zip(x_hat.data_mut().chunks_exact_mut(f))
        {
            for j in 0..f {
                hrow[j] = (xrow[j] - mean[j]) * inv_std[j];
            }
        }
        let ad = self.value(alpha).data();
        let bd = self.value(beta).data();
        let mut y = Tensor::zeros(&[n, f]);
        for (hrow, yrow) in x_hat
            .data()
            .chunks_exact(f)
            .zip(y.data_mut().chunks_exact_mut(f))
        {
            for j in 0..f {
                yrow[j] = ad[j] * hrow[j] + bd[j];
            }
        }
        let stats = BatchStats {
            mean,
            var,
        };
        let id = self.push(
            y,
            Op::BatchNormTrain {
                x,
                alpha,
                beta,
                x_hat,
                inv_std,
            },
        );
        Ok((id, stats))
    }

    /// Inference-mode batch normalisation using fixed running statistics.
    /// Each row is normalised independently, so results do not depend on
    /// how evaluation batches are grouped.
    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        alpha: NodeId,
        beta: NodeId,
        running_mean: &[f64],
        running_var: &[f64],
    ) -> Result<NodeId, TensorError> {
        let (n, f) = self.rank2("batch_norm", x)?;
        self.check_bn_params("batch_norm", f, alpha, beta)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![n, f],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let inv_std: Vec<f64> = running_var
            .iter()
            .map(|v| 1.0 / (v + BN_EPSILON).sqrt())
            .collect();
        let xd = self.value(x).data();
        let mut x_hat = Tensor::zeros(&[n, f]);
        for (xrow, hrow) in xd
            .chunks_exact(f)
            .zip(x_hat.data_mut().chunks_exact_mut(f))
        {
            for j in 0..f {
                hrow[j] = (xrow[j] - running_mean[j]) * inv_std[j];
            }
        }
        let ad = self.value(alpha).data();
        let bd = self.value(beta).data();
        let mut y = Tensor::zeros(&[n, f]);
        for (hrow, yrow) in x_hat
            .data()
            .chunks_exact(f)
            .zip(y.data_mut().chunks_exact_mut(f))
        {
            for j in 0..f {
                yrow[j] = ad[j] * hrow[j] + bd[j];
            }
        }
        let id = self.push(
            y,
            Op::BatchNormInfer {
                x,
                alpha,
                beta,
                x_hat,
                inv_std,
            },
        );
        Ok(id)
    }

    fn check_bn_params(
        &self,
        op: &'static str,
        f: usize,
        alpha: NodeId,
        beta: NodeId,
    ) -> Result<(), TensorError> {
        for id in [alpha, beta] {
            let s = self.value(id).shape();
            if s != [f] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: vec![f],
                    rhs: s.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Mean element-wise sigmoid cross-entropy between `logits` and fixed
    /// 0/1 `targets`, averaged over every element (batch x classes).
    ///
    /// Uses `max(z, 0) - z*y + ln(1 + e^-|z|)`, which is exact for moderate
    /// logits and never overflows for extreme ones.
    pub fn sigmoid_ce_mean(
        &mut self,
        logits: NodeId,
        targets: &Tensor,
    ) -> Result<NodeId, TensorError> {
        let (n, c) = self.rank2("sigmoid_ce_mean", logits)?;
        if targets.shape() != [n, c] {
            return Err(TensorError::ShapeMismatch {
                op: "sigmoid_ce_mean",
                lhs: vec![n, c],
                rhs: targets.shape().to_vec(),
            });
        }
        let mut sum = 0.0;
        for (&z, &y) in self.value(logits).data().iter().zip(targets.data()) {
            sum += z.max(0.0) - z * y + softplus(-z.abs());
        }
        let mean = sum / (n * c) as f64;
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SigmoidCeMean {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// Runs the reverse sweep from a scalar `root`, filling in leaf
    /// gradients. Interior gradients are freed as soon as they have been
    /// propagated to their operands.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        let root_shape = self.value(root).shape().to_vec();
        if self.value(root).len() != 1 {
            return Err(TensorError::NonScalarLoss { shape: root_shape });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::full(&root_shape, 1.0));

        for i in (0..=root.0).rev() {
            let gy = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {
                    // Leaves keep their gradient for the caller.
                    self.grads[i] = Some(gy);
                    continue;
                }
                Op::Matmul { a, b } => {
                    let (a, b) = (*a, *b);
                    let (m, k) = {
                        let s = self.nodes[a.0].value.shape();
                        (s[0], s[1])
                    };
                    let n = self.nodes[b.0].value.shape()[1];
                    // dA += dC @ B^T
                    {
                        let gb = self.grad_buf(a);
                        let mut tmp = std::mem::take(gb);
                        matmul_bt_acc(
                            gy.data(),
                            self.nodes[b.0].value.data(),
                            tmp.data_mut(),
                            m,
                            n,
                            k,
                        );
                        self.grads[a.0] = Some(tmp);
                    }
                    // dB += A^T @ dC
                    {
                        let gb = self.grad_buf(b);
                        let mut tmp = std::mem::take(gb);
                        matmul_at_acc(
                            self.nodes[a.0].value.data(),
                            gy.data(),
                            tmp.data_mut(),
                            k,
                            m,
                            n,
                        );
                        self.grads[b.0] = Some(tmp);
                    }
                }
                Op::Linear { x, w, bias } => {
                    let (x, w, bias) = (*x, *w, *bias);
                    let (n, k) = {
                        let s = self.nodes[x.0].value.shape();
                        (s[0], s[1])
                    };
                    let out = self.nodes[w.0].value.shape()[0];
                    // dx += dy @ w
                    {
                        let gb = self.grad_buf(x);
                        let mut tmp = std::mem::take(gb);
                        matmul_acc(
                            gy.data(),
                            self.nodes[w.0].value.data(),
                            tmp.data_mut(),
                            n,
                            out,
                            k,
                        );
                        self.grads[x.0] = Some(tmp);
                    }
                    // dw += dy^T @ x
                    {
                        let gb = self.grad_buf(w);
                        let mut tmp = std::mem::take(gb);
                        matmul_at_acc(
                            gy.data(),
                            self.nodes[x.0].value.data(),
                            tmp.data_mut(),
                            out,
                            n,
                            k,
                        );
                        self.grads[w.0] = Some(tmp);
                    }
                    // db += column sums of dy
                    if let Some(b) = bias {
                        let gb = self.grad_buf(b);
                        for row in gy.data().chunks_exact(out) {
                            for (g, v) in gb.data_mut().iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.acc_elementwise(a, gy.data(), |g, dy| *g += dy);
                    self.acc_elementwise(b, gy.data(), |g, dy| *g += dy);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let ad = self.nodes[a.0].value.data().to_vec();
                    {
                        let gb = self.grad_buf(a);
                        for ((g, dy), v) in gb.data_mut().iter_mut().zip(gy.data()).zip(&bd) {
                            *g += dy * v;
                        }
                    }
                    {
                        let gb = self.grad_buf(b);
                        for ((g, dy), v) in gb.data_mut().iter_mut().zip(gy.data()).zip(&ad) {
                            *g += dy * v;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    self.acc_elementwise(x, gy.data(), |g, dy| *g += c * dy);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let yv = self.nodes[i].value.data().to_vec();
                    let gb = self.grad_buf(x);
                    for ((g, dy), y) in gb.data_mut().iter_mut().zip(gy.data()).zip(&yv) {
                        *g += dy * y * (1.0 - y);
                    }
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let yv = self.nodes[i].value.data().to_vec();
                    let gb = self.grad_buf(x);
                    for ((g, dy), y) in gb.data_mut().iter_mut().zip(gy.data()).zip(&yv) {
                        *g += dy * (1.0 - y * y);
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gb = self.grad_buf(x);
                    for ((g, dy), v) in gb.data_mut().iter_mut().zip(gy.data()).zip(&xv) {
                        if *v > 0.0 {
                            *g += dy;
                        }
                    }
                }
                Op::ConcatLast { a, b } => {
                    let (a, b) = (*a, *b);
                    let la = *self.nodes[a.0].value.shape().last().unwrap();
                    let lb = *self.nodes[b.0].value.shape().last().unwrap();
                    let rows = gy.len() / (la + lb);
                    {
                        let gb = self.grad_buf(a);
                        for r in 0..rows {
                            let src = &gy.data()[r * (la + lb)..r * (la + lb) + la];
                            let dst = &mut gb.data_mut()[r * la..(r + 1) * la];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    {
                        let gb = self.grad_buf(b);
                        for r in 0..rows {
                            let src = &gy.data()[r * (la + lb) + la..(r + 1) * (la + lb)];
                            let dst = &mut gb.data_mut()[r * lb..(r + 1) * lb];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
                Op::ReverseTime { x } => {
                    let x = *x;
                    let rev = reverse_time_tensor(&gy);
                    self.acc_elementwise(x, rev.data(), |g, dy| *g += dy);
                }
                Op::SliceTime { x, t } => {
                    let (x, t) = (*x, *t);
                    let s = self.nodes[x.0].value.shape().to_vec();
                    let (time, d) = (s[1], s[2]);
                    let gb = self.grad_buf(x);
                    for (bi, row) in gy.data().chunks_exact(d).enumerate() {
                        let off = (bi * time + t) * d;
                        let dst = &mut gb.data_mut()[off..off + d];
                        for (g, v) in dst.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
                Op::StackTime { parts } => {
                    let parts = parts.clone();
                    let t = parts.len();
                    let (b, d) = {
                        let s = self.nodes[parts[0].0].value.shape();
                        (s[0], s[1])
                    };
                    for (ti, &p) in parts.iter().enumerate() {
                        let gb = self.grad_buf(p);
                        for bi in 0..b {
                            let src = &gy.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                            let dst = &mut gb.data_mut()[bi * d..(bi + 1) * d];
                            for (g, v) in dst.iter_mut().zip(src) {
                                *g += v;
                            }
                        }
                    }
                }
                Op::SliceCols { x, c0, c1 } => {
                    let (x, c0, c1) = (*x, *c0, *c1);
                    let d = self.nodes[x.0].value.shape()[1];
                    let w = c1 - c0;
                    let gb = self.grad_buf(x);
                    for (r, row) in gy.data().chunks_exact(w).enumerate() {
                        let dst = &mut gb.data_mut()[r * d + c0..r * d + c1];
                        for (g, v) in dst.iter_mut().zip(row) {
                            *g += v;
                        }
                    }
                }
                Op::Reshape { x } => {
                    let x = *x;
                    self.acc_elementwise(x, gy.data(), |g, dy| *g += dy);
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let dy = gy.data()[0];
                    let gb = self.grad_buf(x);
                    for g in gb.data_mut() {
                        *g += dy;
                    }
                }
                Op::SumSq { x } => {
                    let x = *x;
                    let dy = gy.data()[0];
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let gb = self.grad_buf(x);
                    for (g, v) in gb.data_mut().iter_mut().zip(&xv) {
                        *g += 2.0 * dy * v;
                    }
                }
                Op::BatchNormTrain {
                    x,
                    alpha,
                    beta,
                    x_hat,
                    inv_std,
                } => {
                    let (x, alpha, beta) = (*x, *alpha, *beta);
                    let f = inv_std.len();
                    let n = x_hat.len() / f;
                    let x_hat = x_hat.clone();
                    let inv_std = inv_std.clone();
                    let ad = self.nodes[alpha.0].value.data().to_vec();
                    // d_beta += column sums of dy; d_alpha += sum dy*x_hat
                    {
                        let gb = self.grad_buf(beta);
                        for row in gy.data().chunks_exact(f) {
                            for (g, v) in gb.data_mut().iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                    {
                        let ga = self.grad_buf(alpha);
                        for (row, hrow) in gy.data().chunks_exact(f).zip(x_hat.data().chunks_exact(f)) {
                            for j in 0..f {
                                ga.data_mut()[j] += row[j] * hrow[j];
                            }
                        }
                    }
                    // dx via the closed form for population-statistics batch
                    // norm: both the mean and the variance depend on x, so
                    // each input's gradient couples to the whole column.
                    let mut sum_dxh = vec![0.0; f];
                    let mut sum_dxh_xh = vec![0.0; f];
                    for (row, hrow) in gy.data().chunks_exact(f).zip(x_hat.data().chunks_exact(f)) {
                        for j in 0..f {
                            let dxh = row[j] * ad[j];
                            sum_dxh[j] += dxh;
                            sum_dxh_xh[j] += dxh * hrow[j];
                        }
                    }
                    let gb = self.grad_buf(x);
                    let nf = n as f64;
                    for ((grow, row), hrow) in gb
                        .data_mut()
                        .chunks_exact_mut(f)
                        .zip(gy.data().chunks_exact(f))
                        .zip(x_hat.data().chunks_exact(f))
                    {
                        for j in 0..f {
                            let dxh = row[j] * ad[j];
                            grow[j] += inv_std[j] / nf
                                * (nf * dxh - sum_dxh[j] - hrow[j] * sum_dxh_xh[j]);
                        }
                    }
                }
                Op::BatchNormInfer {
                    x,
                    alpha,
                    beta,
                    x_hat,
                    inv_std,
                } => {
                    let (x, alpha, beta) = (*x, *alpha, *beta);
                    let f = inv_std.len();
                    let x_hat = x_hat.clone();
                    let inv_std = inv_std.clone();
                    let ad = self.nodes[alpha.0].value.data().to_vec();
                    {
                        let gb = self.grad_buf(beta);
                        for row in gy.data().chunks_exact(f) {
                            for (g, v) in gb.data_mut().iter_mut().zip(row) {
                                *g += v;
                            }
                        }
                    }
                    {
                        let ga = self.grad_buf(alpha);
                        for (row, hrow) in gy.data().chunks_exact(f).zip(x_hat.data().chunks_exact(f)) {
                            for j in 0..f {
                                ga.data_mut()[j] += row[j] * hrow[j];
                            }
                        }
                    }
                    // Running statistics are constants here, so dx is a
                    // simple per-feature rescale.
                    let gb = self.grad_buf(x);
                    for (grow, row) in gb.data_mut().chunks_exact_mut(f).zip(gy.data().chunks_exact(f)) {
                        for j in 0..f {
                            grow[j] += row[j] * ad[j] * inv_std[j];
                        }
                    }
                }
                Op::Dropout { x, mask, keep } => {
                    let (x, keep) = (*x, *keep);
                    let mask = mask.clone();
                    let inv = 1.0 / keep;
                    let gb = self.grad_buf(x);
                    for ((g, dy), m) in gb.data_mut().iter_mut().zip(gy.data()).zip(&mask) {
                        if *m {
                            *g += dy * inv;
                        }
                    }
                }
                Op::SigmoidCeMean { logits, targets } => {
                    let logits = *logits;
                    let targets = targets.clone();
                    let dy = gy.data()[0];
                    let scale = dy / targets.len() as f64;
                    let zv = self.nodes[logits.0].value.data().to_vec();
                    let gb = self.grad_buf(logits);
                    for ((g, &z), &y) in gb.data_mut().iter_mut().zip(&zv).zip(targets.data()) {
                        *g += scale * (sigmoid(z) - y);
                    }
                }
            }
            // Interior gradient fully propagated; free it.
        }
        Ok(())
    }

    /// Ensures a zeroed gradient buffer exists for `id` and returns it.
    fn grad_buf(&mut self, id: NodeId) -> &mut Tensor {
        if self.grads[id.0].is_none() {
            let shape = self.nodes[id.0].value.shape().to_vec();
            self.grads[id.0] = Some(Tensor::zeros(&shape));
        }
        self.grads[id.0].as_mut().unwrap()
    }

    fn acc_elementwise<F: Fn(&mut f64, f64)>(&mut self, id: NodeId, dy: &[f64], f: F) {
        let gb = self.grad_buf(id);
        for (g, &v) in gb.data_mut().iter_mut().zip(dy) {
            f(g, v);
        }
    }
}

fn reverse_time_tensor(x: &Tensor) -> Tensor {
    let s = x.shape();
    let d = s[s.len() - 1];
    let t = s[s.len() - 2];
    let lead: usize = s[..s.len() - 2].iter().product::<usize>().max(1);
    let mut out = Tensor::zeros(s);
    let src = x.data();
    let dst = out.data_mut();
    for b in 0..lead {
        for ti in 0..t {
            let from = (b * t + ti) * d;
            let to = (b * t + (t - 1 - ti)) * d;
            dst[to..to + d].copy_from_slice(&src[from..from + d]);
        }
    }
    out
}
