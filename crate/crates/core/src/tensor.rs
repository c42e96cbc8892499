//! Dense f64 tensors on a reverse-mode differentiation tape.
//!
//! The tape is rebuilt each forward pass (define-by-run): every operation
//! records enough to replay itself backward, and `backward` walks the
//! recorded nodes in reverse to accumulate cotangents. Values are stored
//! row-major. A tape and its tensors are confined to a single thread.

use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch for {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid shape for {op}: {shape:?} ({detail})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("axis {axis} out of bounds for shape {shape:?}")]
    AxisOutOfBounds { axis: usize, shape: Vec<usize> },
    #[error("label {label} at row {row} out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataShapeMismatch { len: usize, shape: Vec<usize> },
    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },
}

pub type TensorResult<T> = Result<T, TensorError>;

/// An n-dimensional array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TensorResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.contains(&0) {
            return Err(TensorError::DataShapeMismatch {
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// 2-D tensor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> TensorResult<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
            return Err(TensorError::InvalidShape {
                op: "from_rows",
                shape: vec![r, c],
                detail: "rows must be non-empty and rectangular".into(),
            });
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
        trans_a: bool,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    /// `b`'s shape is a suffix of `a`'s shape; `b` is tiled over the
    /// leading dimensions.
    AddBroadcast {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        a: TensorId,
        factor: f64,
    },
    Relu {
        a: TensorId,
    },
    Mean {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    CrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
    },
    Reshape {
        a: TensorId,
    },
    SplitHeads {
        a: TensorId,
        heads: usize,
    },
    MergeHeads {
        a: TensorId,
        heads: usize,
    },
    Stack {
        parts: Vec<TensorId>,
    },
    SelectToken {
        a: TensorId,
        index: usize,
    },
    PickRows {
        sources: Vec<TensorId>,
        picks: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    /// Persistent accumulated gradient; backward passes add into it.
    grad: Option<Vec<f64>>,
}

/// Ordered record of operations supporting reverse-mode replay.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── matmul kernels ──────────────────────────────────────────────────

/// out += A·B with A [m,k], B [k,n].
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // Four k-steps per pass over the output row: the kernel is bound by
    // out-row loads/stores at these small sizes, not by FMA throughput.
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                let acc = a0.mul_add(b0[j], out_row[j]);
                let acc = a1.mul_add(b1[j], acc);
                let acc = a2.mul_add(b2[j], acc);
                out_row[j] = a3.mul_add(b3[j], acc);
            }
            p += 4;
        }
        while p < k {
            let ap = a_row[p];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = ap.mul_add(b_row[j], out_row[j]);
            }
            p += 1;
        }
    }
}

/// out += A·Bᵀ with A [m,k], B [n,k].
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // Four independent accumulators break the serial FMA dependency chain
    // of a plain dot product.
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let (mut s0, mut s1, mut s2, mut s3) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            let mut p = 0;
            while p + 4 <= k {
                s0 = a_row[p].mul_add(b_row[p], s0);
                s1 = a_row[p + 1].mul_add(b_row[p + 1], s1);
                s2 = a_row[p + 2].mul_add(b_row[p + 2], s2);
                s3 = a_row[p + 3].mul_add(b_row[p + 3], s3);
                p += 4;
            }
            while p < k {
                s0 = a_row[p].mul_add(b_row[p], s0);
                p += 1;
            }
            out[i * n + j] += (s0 + s1) + (s2 + s3);
        }
    }
}

/// out += Aᵀ·B with A [k,m], B [k,n].
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // Same out-row blocking as mm_nn; A is read down its columns.
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p + 4 <= k {
            let a0 = a[p * m + i];
            let a1 = a[(p + 1) * m + i];
            let a2 = a[(p + 2) * m + i];
            let a3 = a[(p + 3) * m + i];
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                let acc = a0.mul_add(b0[j], out_row[j]);
                let acc = a1.mul_add(b1[j], acc);
                let acc = a2.mul_add(b2[j], acc);
                out_row[j] = a3.mul_add(b3[j], acc);
            }
            p += 4;
        }
        while p < k {
            let ap = a[p * m + i];
            let b_row = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out_row[j] = ap.mul_add(b_row[j], out_row[j]);
            }
            p += 1;
        }
    }
}

fn add_into(target: &mut [f64], src: &[f64]) {
    for (t, s) in target.iter_mut().zip(src) {
        *t += s;
    }
}

/// (outer, axis_len, inner) decomposition for iterating slices along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Drop all recorded nodes; tensor ids from before the reset are invalid.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> TensorId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            grad: None,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn requires(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Record a leaf tensor. Gradients are accumulated only for leaves
    /// (and downstream nodes) with `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn scalar_value(&self, id: TensorId) -> TensorResult<f64> {
        let t = self.value(id);
        if !t.is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: t.shape().to_vec(),
            });
        }
        Ok(t.data()[0])
    }

    pub fn clear_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    // ── shape bookkeeping ───────────────────────────────────────────

    fn matmul_dims(
        &self,
        a: TensorId,
        b: TensorId,
        trans_a: bool,
        trans_b: bool,
        op: &'static str,
    ) -> TensorResult<(usize, usize, usize, usize)> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        let mismatch = || TensorError::ShapeMismatch {
            op,
            left: sa.to_vec(),
            right: sb.to_vec(),
        };
        if sa.len() < 2 || sa.len() > 3 || sb.len() < 2 || sb.len() > 3 {
            return Err(mismatch());
        }
        // [B, t, k] × [k, n]: every token row hits the same right matrix,
        // so the product collapses to one [B·t, k] × [k, n] call.
        if sa.len() == 3 && sb.len() == 2 {
            if trans_a {
                return Err(mismatch());
            }
            let (rb, cb) = (sb[0], sb[1]);
            let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
            if sa[2] != kb {
                return Err(mismatch());
            }
            return Ok((1, sa[0] * sa[1], kb, n));
        }
        if sa.len() != sb.len() {
            return Err(mismatch());
        }
        let batch = if sa.len() == 3 { sa[0] } else { 1 };
        if sa.len() == 3 && sb[0] != batch {
            return Err(mismatch());
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, ka) = if trans_a { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if trans_b { (cb, rb) } else { (rb, cb) };
        if ka != kb {
            return Err(mismatch());
        }
        Ok((batch, m, ka, n))
    }

    fn matmul_ex(
        &mut self,
        a: TensorId,
        b: TensorId,
        trans_a: bool,
        trans_b: bool,
        op: &'static str,
    ) -> TensorResult<TensorId> {
        let (batch, m, k, n) = self.matmul_dims(a, b, trans_a, trans_b, op)?;
        let sa = self.value(a).shape();
        let shape = if sa.len() == 3 && self.value(b).shape().len() == 2 {
            vec![sa[0], sa[1], n]
        } else if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let asl = &ad[bi * m * k..(bi + 1) * m * k];
                let bsl = &bd[bi * k * n..(bi + 1) * k * n];
                let osl = &mut out[bi * m * n..(bi + 1) * m * n];
                match (trans_a, trans_b) {
                    (false, false) => mm_nn(asl, bsl, m, k, n, osl),
                    (false, true) => mm_nt(asl, bsl, m, k, n, osl),
                    (true, false) => mm_tn(asl, bsl, m, k, n, osl),
                    (true, true) => unreachable!("TT matmul is never recorded"),
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    // ── public operations ───────────────────────────────────────────

    /// Matrix product; operands are both [m,k]/[k,n] or batched
    /// [batch,m,k]/[batch,k,n].
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.matmul_ex(a, b, false, false, "matmul")
    }

    /// A·Bᵀ with B stored [n,k].
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.matmul_ex(a, b, false, true, "matmul_nt")
    }

    /// Aᵀ·B with A stored [k,m].
    pub fn matmul_tn(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.matmul_ex(a, b, true, false, "matmul_tn")
    }

    fn binary_same_shape(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        record: impl FnOnce(TensorId, TensorId) -> Op,
    ) -> TensorResult<TensorId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape, data }, record(a, b), rg))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    /// a + b where b's shape is a suffix of a's shape (e.g. bias over rows).
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> TensorResult<TensorId> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(TensorError::ShapeMismatch {
                op: "add_broadcast",
                left: sa,
                right: sb,
            });
        }
        let bn = self.value(b).numel();
        let data: Vec<f64> = {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            ad.iter()
                .enumerate()
                .map(|(i, &x)| x + bd[i % bn])
                .collect()
        };
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Tensor { shape: sa, data }, Op::AddBroadcast { a, b }, rg))
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor { shape, data }, Op::Scale { a, factor }, rg)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f64> = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.requires(a);
        self.push(Tensor { shape, data }, Op::Relu { a }, rg)
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.requires(a);
        self.push(Tensor::scalar(m), Op::Mean { a }, rg)
    }

    /// Numerically stabilized softmax along `axis`; each slice sums to 1.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorResult<TensorId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::AxisOutOfBounds { axis, shape });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Tensor { shape, data: out }, Op::Softmax { a, axis }, rg))
    }

    /// Per-row normalization over the last dimension (population variance),
    /// followed by the affine map gamma/beta.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorResult<TensorId> {
        let shape = self.value(x).shape().to_vec();
        let Some(&d) = shape.last() else {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape,
                detail: "input must have at least one dimension".into(),
            });
        };
        for id in [gamma, beta] {
            if self.value(id).shape() != [d] {
                return Err(TensorError::InvalidShape {
                    op: "layer_norm",
                    shape: self.value(id).shape().to_vec(),
                    detail: format!("gamma and beta must have shape [{d}]"),
                });
            }
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape,
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let mut out = vec![0.0; self.value(x).numel()];
        {
            let xd = self.value(x).data();
            let gd = self.value(gamma).data();
            let bd = self.value(beta).data();
            for (row, orow) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for j in 0..d {
                    orow[j] = (row[j] - mean) * inv_std * gd[j] + bd[j];
                }
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Tensor { shape, data: out },
            Op::LayerNorm { x, gamma, beta, eps },
            rg,
        ))
    }

    /// Mean over the batch of −log softmax(logits)[label], via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> TensorResult<TensorId> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::InvalidShape {
                op: "cross_entropy",
                shape,
                detail: format!("expected [batch={}, classes] logits", labels.len()),
            });
        }
        let (batch, classes) = (shape[0], shape[1]);
        for (row, &label) in labels.iter().enumerate() {
            if label >= classes {
                return Err(TensorError::LabelOutOfRange { row, label, classes });
            }
        }
        let mut total = 0.0;
        {
            let ld = self.value(logits).data();
            for (b, row) in ld.chunks_exact(classes).enumerate() {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                total -= row[labels[b]] - lse;
            }
        }
        total /= batch as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: TensorId, new_shape: Vec<usize>) -> TensorResult<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(a).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.value(a).shape().to_vec(),
                right: new_shape,
            });
        }
        let data = self.value(a).data().to_vec();
        let rg = self.requires(a);
        Ok(self.push(
            Tensor {
                shape: new_shape,
                data,
            },
            Op::Reshape { a },
            rg,
        ))
    }

    /// [batch, n, d] -> [batch*heads, n, d/heads], separating the feature
    /// dimension into per-head blocks.
    pub fn split_heads(&mut self, a: TensorId, heads: usize) -> TensorResult<TensorId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 3 || heads == 0 || !shape[2].is_multiple_of(heads) {
            return Err(TensorError::InvalidShape {
                op: "split_heads",
                shape,
                detail: format!("need rank-3 input with last dim divisible by {heads} heads"),
            });
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let dh = d / heads;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..n {
                    let dst = ((bi * heads + h) * n + t) * dh;
                    let s = (bi * n + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(
            Tensor {
                shape: vec![b * heads, n, dh],
                data: out,
            },
            Op::SplitHeads { a, heads },
            rg,
        ))
    }

    /// Inverse of [`Tape::split_heads`]: [batch*heads, n, dh] -> [batch, n, heads*dh].
    pub fn merge_heads(&mut self, a: TensorId, heads: usize) -> TensorResult<TensorId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() != 3 || heads == 0 || !shape[0].is_multiple_of(heads) {
            return Err(TensorError::InvalidShape {
                op: "merge_heads",
                shape,
                detail: format!("need rank-3 input with batch divisible by {heads} heads"),
            });
        }
        let (bh, n, dh) = (shape[0], shape[1], shape[2]);
        let b = bh / heads;
        let d = heads * dh;
        let src = self.value(a).data();
        let mut out = vec![0.0; src.len()];
        for bi in 0..b {
            for h in 0..heads {
                for t in 0..n {
                    let s = ((bi * heads + h) * n + t) * dh;
                    let dst = (bi * n + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&src[s..s + dh]);
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(
            Tensor {
                shape: vec![b, n, d],
                data: out,
            },
            Op::MergeHeads { a, heads },
            rg,
        ))
    }

    /// Stack N tensors of shape [b, inner...] into [b, N, inner...].
    pub fn stack(&mut self, parts: &[TensorId]) -> TensorResult<TensorId> {
        let first = *parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "stack",
            shape: vec![],
            detail: "need at least one tensor".into(),
        })?;
        let shape = self.value(first).shape().to_vec();
        for &p in parts {
            if self.value(p).shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: shape,
                    right: self.value(p).shape().to_vec(),
                });
            }
        }
        let b = shape[0];
        let inner: usize = shape[1..].iter().product();
        let n = parts.len();
        let mut out = vec![0.0; b * n * inner];
        for (i, &p) in parts.iter().enumerate() {
            let src = self.value(p).data();
            for bi in 0..b {
                let dst = (bi * n + i) * inner;
                out[dst..dst + inner].copy_from_slice(&src[bi * inner..(bi + 1) * inner]);
            }
        }
        let mut out_shape = vec![b, n];
        out_shape.extend_from_slice(&shape[1..]);
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::Stack {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// [b, n, inner...] -> [b, inner...], taking slot `index` along axis 1.
    pub fn select_token(&mut self, a: TensorId, index: usize) -> TensorResult<TensorId> {
        let shape = self.value(a).shape().to_vec();
        if shape.len() < 2 || index >= shape[1] {
            return Err(TensorError::InvalidShape {
                op: "select_token",
                shape,
                detail: format!("token index {index} out of range"),
            });
        }
        let (b, n) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.value(a).data();
        let mut out = vec![0.0; b * inner];
        for bi in 0..b {
            let s = (bi * n + index) * inner;
            out[bi * inner..(bi + 1) * inner].copy_from_slice(&src[s..s + inner]);
        }
        let mut out_shape = vec![b];
        out_shape.extend_from_slice(&shape[2..]);
        let rg = self.requires(a);
        Ok(self.push(
            Tensor {
                shape: out_shape,
                data: out,
            },
            Op::SelectToken { a, index },
            rg,
        ))
    }

    /// Row-wise selection among alternative sources: out[i] = sources[picks[i]][i].
    /// All sources share one shape [rows, inner...]; picks has one entry per row.
    pub fn pick_rows(&mut self, sources: &[TensorId], picks: &[usize]) -> TensorResult<TensorId> {
        let first = *sources.first().ok_or_else(|| TensorError::InvalidShape {
            op: "pick_rows",
            shape: vec![],
            detail: "need at least one source".into(),
        })?;
        let shape = self.value(first).shape().to_vec();
        for &s in sources {
            if self.value(s).shape() != shape {
                return Err(TensorError::ShapeMismatch {
                    op: "pick_rows",
                    left: shape,
                    right: self.value(s).shape().to_vec(),
                });
            }
        }
        let rows = shape[0];
        if picks.len() != rows {
            return Err(TensorError::InvalidShape {
                op: "pick_rows",
                shape,
                detail: format!("got {} picks for {} rows", picks.len(), rows),
            });
        }
        for (row, &pick) in picks.iter().enumerate() {
            if pick >= sources.len() {
                return Err(TensorError::LabelOutOfRange {
                    row,
                    label: pick,
                    classes: sources.len(),
                });
            }
        }
        let inner: usize = shape[1..].iter().product();
        let mut out = vec![0.0; rows * inner];
        for (row, &pick) in picks.iter().enumerate() {
            let src = self.value(sources[pick]).data();
            out[row * inner..(row + 1) * inner]
                .copy_from_slice(&src[row * inner..(row + 1) * inner]);
        }
        let rg = sources.iter().any(|&s| self.requires(s));
        Ok(self.push(
            Tensor { shape, data: out },
            Op::PickRows {
                sources: sources.to_vec(),
                picks: picks.to_vec(),
            },
            rg,
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Cotangents are computed in a
    /// per-pass scratch buffer and then added into each requires_grad
    /// node's persistent gradient, so repeated calls accumulate.
    pub fn backward(&mut self, loss: TensorId) -> TensorResult<()> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape().to_vec(),
            });
        }
        let n = self.nodes.len();
        let mut cot: Vec<Option<Vec<f64>>> = vec![None; n];
        cot[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            let Some(g) = cot[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut cot);
            match &mut self.nodes[i].grad {
                Some(grad) => add_into(grad, &g),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn scratch(cot: &mut [Option<Vec<f64>>], id: TensorId, numel: usize) -> &mut Vec<f64> {
        cot[id.0].get_or_insert_with(|| vec![0.0; numel])
    }

    fn scratch_add(cot: &mut [Option<Vec<f64>>], id: TensorId, src: &[f64]) {
        match &mut cot[id.0] {
            Some(buf) => add_into(buf, src),
            slot => *slot = Some(src.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], cot: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                if self.requires(a) {
                    let numel = self.value(a).numel();
                    let bd = self.value(b).data();
                    let da = Self::scratch(cot, a, numel);
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = &bd[bi * k * n..(bi + 1) * k * n];
                        let da_s = &mut da[bi * m * k..(bi + 1) * m * k];
                        match (trans_a, trans_b) {
                            // C = A·B:   dA = dC·Bᵀ
                            (false, false) => mm_nt(gs, bs, m, n, k, da_s),
                            // C = A·Bᵀ:  dA = dC·B  (B stored [n,k])
                            (false, true) => mm_nn(gs, bs, m, n, k, da_s),
                            // C = Aᵀ·B:  dA = B·dCᵀ  (A stored [k,m])
                            (true, false) => mm_nt(bs, gs, k, n, m, da_s),
                            (true, true) => unreachable!(),
                        }
                    }
                }
                if self.requires(b) {
                    let numel = self.value(b).numel();
                    let ad = self.value(a).data();
                    let db = Self::scratch(cot, b, numel);
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                        let db_s = &mut db[bi * k * n..(bi + 1) * k * n];
                        match (trans_a, trans_b) {
                            // C = A·B:   dB = Aᵀ·dC
                            (false, false) => mm_tn(as_, gs, k, m, n, db_s),
                            // C = A·Bᵀ (B stored [n,k]): dB = dCᵀ·A
                            (false, true) => mm_tn(gs, as_, n, m, k, db_s),
                            // C = Aᵀ·B (A stored [k,m]): dB = A·dC
                            (true, false) => mm_nn(as_, gs, k, m, n, db_s),
                            (true, true) => unreachable!(),
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                if self.requires(a) {
                    Self::scratch_add(cot, a, g);
                }
                if self.requires(b) {
                    Self::scratch_add(cot, b, g);
                }
            }
            Op::AddBroadcast { a, b } => {
                if self.requires(a) {
                    Self::scratch_add(cot, a, g);
                }
                if self.requires(b) {
                    let bn = self.value(b).numel();
                    let db = Self::scratch(cot, b, bn);
                    for (i, &gv) in g.iter().enumerate() {
                        db[i % bn] += gv;
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.requires(a) {
                    Self::scratch_add(cot, a, g);
                }
                if self.requires(b) {
                    let db = Self::scratch(cot, b, g.len());
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.requires(a) {
                    let bd = self.value(b).data();
                    let da = Self::scratch(cot, a, g.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                }
                if self.requires(b) {
                    let ad = self.value(a).data();
                    let db = Self::scratch(cot, b, g.len());
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                if self.requires(a) {
                    let da = Self::scratch(cot, a, g.len());
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * factor;
                    }
                }
            }
            Op::Relu { a } => {
                if self.requires(a) {
                    let xd = self.value(a).data();
                    let da = Self::scratch(cot, a, g.len());
                    for i in 0..g.len() {
                        // subgradient 0 at the kink
                        if xd[i] > 0.0 {
                            da[i] += g[i];
                        }
                    }
                }
            }
            Op::Mean { a } => {
                if self.requires(a) {
                    let n = self.value(a).numel();
                    let gv = g[0] / n as f64;
                    let da = Self::scratch(cot, a, n);
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Softmax { a, axis } => {
                if self.requires(a) {
                    let out = self.value(TensorId(i)).data();
                    let shape = self.value(TensorId(i)).shape();
                    let (outer, len, inner) = axis_split(shape, axis);
                    let da = Self::scratch(cot, a, out.len());
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += g[at(j)] * out[at(j)];
                            }
                            for j in 0..len {
                                da[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.value(x).shape().last().unwrap();
                let xd = self.value(x).data();
                let gd = self.value(gamma).data();
                let rows = xd.len() / d;
                let mut dx = vec![0.0; xd.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let xs = &xd[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let mean = xs.iter().sum::<f64>() / d as f64;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[j] = (xs[j] - mean) * inv_std;
                        dxhat[j] = gs[j] * gd[j];
                    }
                    let sum_dxhat: f64 = dxhat.iter().sum();
                    let sum_dxhat_xhat: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                    let df = d as f64;
                    for j in 0..d {
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                        dx[r * d + j] +=
                            inv_std / df * (df * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
                    }
                }
                if self.requires(x) {
                    Self::scratch_add(cot, x, &dx);
                }
                if self.requires(gamma) {
                    Self::scratch_add(cot, gamma, &dgamma);
                }
                if self.requires(beta) {
                    Self::scratch_add(cot, beta, &dbeta);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                if self.requires(logits) {
                    let shape = self.value(logits).shape();
                    let (batch, classes) = (shape[0], shape[1]);
                    let ld = self.value(logits).data();
                    let dl = Self::scratch(cot, logits, batch * classes);
                    let scale = g[0] / batch as f64;
                    for b in 0..batch {
                        let row = &ld[b * classes..(b + 1) * classes];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for c in 0..classes {
                            let p = exps[c] / sum;
                            let t = if c == labels[b] { 1.0 } else { 0.0 };
                            dl[b * classes + c] += scale * (p - t);
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if self.requires(a) {
                    Self::scratch_add(cot, a, g);
                }
            }
            Op::SplitHeads { a, heads } => {
                if self.requires(a) {
                    let shape = self.value(a).shape();
                    let (b, n, d) = (shape[0], shape[1], shape[2]);
                    let dh = d / heads;
                    let da = Self::scratch(cot, a, b * n * d);
                    for bi in 0..b {
                        for h in 0..heads {
                            for t in 0..n {
                                let s = ((bi * heads + h) * n + t) * dh;
                                let dst = (bi * n + t) * d + h * dh;
                                for c in 0..dh {
                                    da[dst + c] += g[s + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { a, heads } => {
                if self.requires(a) {
                    let shape = self.value(a).shape();
                    let (bh, n, dh) = (shape[0], shape[1], shape[2]);
                    let b = bh / heads;
                    let d = heads * dh;
                    let da = Self::scratch(cot, a, bh * n * dh);
                    for bi in 0..b {
                        for h in 0..heads {
                            for t in 0..n {
                                let dst = ((bi * heads + h) * n + t) * dh;
                                let s = (bi * n + t) * d + h * dh;
                                for c in 0..dh {
                                    da[dst + c] += g[s + c];
                                }
                            }
                        }
                    }
                }
            }
            Op::Stack { parts } => {
                let n = parts.len();
                let part_shape = self.value(parts[0]).shape().to_vec();
                let b = part_shape[0];
                let inner: usize = part_shape[1..].iter().product();
                for (idx, &p) in parts.iter().enumerate() {
                    if !self.requires(p) {
                        continue;
                    }
                    let dp = Self::scratch(cot, p, b * inner);
                    for bi in 0..b {
                        let s = (bi * n + idx) * inner;
                        for c in 0..inner {
                            dp[bi * inner + c] += g[s + c];
                        }
                    }
                }
            }
            Op::SelectToken { a, index } => {
                if self.requires(a) {
                    let shape = self.value(a).shape();
                    let (b, n) = (shape[0], shape[1]);
                    let inner: usize = shape[2..].iter().product();
                    let da = Self::scratch(cot, a, b * n * inner);
                    for bi in 0..b {
                        let dst = (bi * n + index) * inner;
                        for c in 0..inner {
                            da[dst + c] += g[bi * inner + c];
                        }
                    }
                }
            }
            Op::PickRows { sources, picks } => {
                let inner = g.len() / picks.len();
                for (row, &pick) in picks.iter().enumerate() {
                    let src = sources[pick];
                    if !self.requires(src) {
                        continue;
                    }
                    let numel = self.value(src).numel();
                    let ds = Self::scratch(cot, src, numel);
                    for c in 0..inner {
                        ds[row * inner + c] += g[row * inner + c];
                    }
                }
            }
        }
    }
}
