//! Reverse-mode automatic differentiation over a fixed operator set.
//!
//! A [`Graph`] is a tape of nodes built fresh for every training step. Ops
//! cover exactly what the two models need: dense affine layers, 1D
//! convolution, RMS normalization, fused causal multi-head attention with
//! rotary embeddings, embedding lookup, cross-entropy, elementwise
//! arithmetic, reductions, and the stop-gradient / straight-through
//! primitives the quantizer requires. No general program taping.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{dot, matmul_into, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Pure RMS normalization of one vector: x / sqrt(mean(x^2) + eps) * gain.
pub fn rmsnorm(x: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.len() != gain.len() {
        return Err(Error::Dimension(format!(
            "rmsnorm gain length {} != input length {}",
            gain.len(),
            x.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Dimension("rmsnorm on empty vector".into()));
    }
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + eps).sqrt();
    Ok(x.iter().zip(gain).map(|(v, g)| v * r * g).collect())
}

/// Pure rotary embedding: consecutive pairs (x[2i], x[2i+1]) rotated by
/// angle position * base^(-2i/d). Norm of each pair is preserved.
pub fn rope_rotate(x: &[f64], position: usize, base: f64) -> Result<Vec<f64>> {
    if x.len() % 2 != 0 {
        return Err(Error::Dimension(format!("rotary embedding wants even length, got {}", x.len())));
    }
    if !(base > 0.0) {
        return Err(Error::Config(format!("rotary base must be positive, got {base}")));
    }
    let mut out = x.to_vec();
    rope_rotate_in_place(&mut out, position as f64, base);
    Ok(out)
}

/// In-place pair rotation; `position` may be negative (inverse rotation),
/// which is what the attention backward pass uses.
pub(crate) fn rope_rotate_in_place(x: &mut [f64], position: f64, base: f64) {
    let d = x.len();
    for i in 0..d / 2 {
        let theta = position * base.powf(-2.0 * i as f64 / d as f64);
        let (s, c) = theta.sin_cos();
        let a = x[2 * i];
        let b = x[2 * i + 1];
        x[2 * i] = a * c - b * s;
        x[2 * i + 1] = a * s + b * c;
    }
}

/// Softmax over `xs` in place (numerically stable).
pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    /// Row-broadcast bias add: x is [N, C], bias is [C].
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    Silu(Var),
    Sigmoid(Var),
    Tanh(Var),
    RmsNorm { x: Var, gain: Var, eps: f64 },
    /// Gather rows of `table` at `ids`.
    Embedding { table: Var, ids: Vec<usize> },
    /// Fused causal multi-head self-attention over `batch` sequences of
    /// length `seq_len` stacked row-wise. Rotary embeddings are applied to
    /// queries and keys inside the op (positions 0..seq_len-1 per sequence).
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        rope_base: f64,
        /// Pre-dropout softmax probabilities, [batch*heads*seq*seq] packed
        /// lower-triangular-dense (full seq*seq rows, zeros above diagonal).
        probs: Vec<f64>,
        q_rot: Tensor,
        k_rot: Tensor,
        /// Inverted-dropout mask over probs (entries 0 or 1/(1-p)).
        drop_mask: Option<Vec<f64>>,
    },
    /// Same-length 1D convolution: x [C_in, T], w [C_out, C_in, K], b [C_out].
    Conv1d { x: Var, w: Var, b: Var },
    Dropout { x: Var, mask: Vec<f64> },
    MeanSqDiff(Var, Var),
    MeanAbsDiff(Var, Var),
    MeanAll(Var),
    /// Masked mean cross-entropy from logits; `probs` holds softmax rows.
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<f64>, probs: Tensor, denom: f64 },
    Detach,
    /// Forward value supplied externally; gradient passes through unchanged
    /// to `grad_to` (identity backward): the stop-gradient trick.
    StraightThrough { grad_to: Var },
    SliceRows { x: Var, start: usize, len: usize },
    /// Sum of same-shape inputs (used to combine per-window scalar losses).
    SumVars(Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Insert a tensor; it participates in gradients iff `requires_grad`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let ng = t.requires_grad;
        self.push(t, Op::Leaf, ng)
    }

    /// Insert a tensor that never needs gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a [1] tensor.
    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut t = self.value(a).clone();
        t.requires_grad = false;
        for (o, x) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += x;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if !xv.is_matrix() || bv.shape().len() != 1 || bv.len() != xv.cols() {
            return Err(Error::Dimension(format!(
                "add_row: x {:?} with bias {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let cols = xv.cols();
        let mut t = xv.clone();
        t.requires_grad = false;
        let bd = self.value(bias).data().to_vec();
        for (i, o) in t.data_mut().iter_mut().enumerate() {
            *o += bd[i % cols];
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddRow(x, bias), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let mut t = self.value(a).clone();
        t.requires_grad = false;
        for (o, x) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= x;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut t = self.value(a).clone();
        t.requires_grad = false;
        for (o, x) in t.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= x;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut t = self.value(a).clone();
        t.requires_grad = false;
        for o in t.data_mut() {
            *o *= c;
        }
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let t = crate::tensor::matmul(self.value(a), self.value(b), ta, tb)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Matmul { a, b, ta, tb }, ng))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        for o in t.data_mut() {
            *o = *o / (1.0 + (-*o).exp());
        }
        let ng = self.needs(x);
        self.push(t, Op::Silu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        for o in t.data_mut() {
            *o = 1.0 / (1.0 + (-*o).exp());
        }
        let ng = self.needs(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        for o in t.data_mut() {
            *o = o.tanh();
        }
        let ng = self.needs(x);
        self.push(t, Op::Tanh(x), ng)
    }

    /// Row-wise RMS normalization of a [N, C] tensor with a [C] gain.
    pub fn rmsnorm_rows(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        if !xv.is_matrix() || gv.shape().len() != 1 || gv.len() != xv.cols() {
            return Err(Error::Dimension(format!(
                "rmsnorm: x {:?} with gain {:?}",
                xv.shape(),
                gv.shape()
            )));
        }
        if !(eps >= 0.0) {
            return Err(Error::Config(format!("rmsnorm eps must be >= 0, got {eps}")));
        }
        let (n, c) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(vec![n, c]);
        for r in 0..n {
            let row = rmsnorm(xv.row(r), gv.data(), eps)?;
            out.data_mut()[r * c..(r + 1) * c].copy_from_slice(&row);
        }
        let ng = self.needs(x) || self.needs(gain);
        Ok(self.push(out, Op::RmsNorm { x, gain, eps }, ng))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if !tv.is_matrix() {
            return Err(Error::Dimension(format!("embedding table must be rank 2, got {:?}", tv.shape())));
        }
        let (rows, width) = (tv.rows(), tv.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Vocab(format!("embedding id {bad} out of range (table has {rows} rows)")));
        }
        let mut out = Tensor::zeros(vec![ids.len(), width]);
        for (r, &id) in ids.iter().enumerate() {
            out.data_mut()[r * width..(r + 1) * width].copy_from_slice(tv.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(out, Op::Embedding { table, ids: ids.to_vec() }, ng))
    }

    /// Fused causal multi-head self-attention with rotary embeddings.
    ///
    /// `q`, `k`, `v` are [batch*seq_len, d_model]; sequences are stacked in
    /// row blocks. `attn_dropout` (train only) drops attention weights with
    /// inverted scaling.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq_len: usize,
        rope_base: f64,
        attn_dropout: Option<(f64, &mut Rng)>,
    ) -> Result<Var> {
        self.same_shape(q, k, "attention q/k")?;
        self.same_shape(q, v, "attention q/v")?;
        let qv = self.value(q);
        if !qv.is_matrix() {
            return Err(Error::Dimension(format!("attention wants rank-2 input, got {:?}", qv.shape())));
        }
        let (n, d) = (qv.rows(), qv.cols());
        if seq_len == 0 || n % seq_len != 0 {
            return Err(Error::Dimension(format!("attention rows {n} not divisible by seq_len {seq_len}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Dimension(format!("d_model {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        if dh % 2 != 0 {
            return Err(Error::Dimension(format!("head dimension {dh} must be even for rotary pairs")));
        }
        if !(rope_base > 0.0) {
            return Err(Error::Config(format!("rotary base must be positive, got {rope_base}")));
        }
        let batch = n / seq_len;

        // Rotate queries and keys per position within each sequence.
        let mut q_rot = self.value(q).clone();
        let mut k_rot = self.value(k).clone();
        q_rot.requires_grad = false;
        k_rot.requires_grad = false;
        for row in 0..n {
            let pos = (row % seq_len) as f64;
            for h in 0..heads {
                let lo = row * d + h * dh;
                rope_rotate_in_place(&mut q_rot.data_mut()[lo..lo + dh], pos, rope_base);
                rope_rotate_in_place(&mut k_rot.data_mut()[lo..lo + dh], pos, rope_base);
            }
        }

        let drop_mask = match attn_dropout {
            Some((p, rng)) if p > 0.0 => {
                if p >= 1.0 {
                    return Err(Error::Config(format!("dropout rate must be < 1, got {p}")));
                }
                let keep = 1.0 / (1.0 - p);
                let mut m = vec![0.0; batch * heads * seq_len * seq_len];
                for e in m.iter_mut() {
                    *e = if rng.uniform() < p { 0.0 } else { keep };
                }
                Some(m)
            }
            _ => None,
        };

        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; batch * heads * seq_len * seq_len];
        let mut out = Tensor::zeros(vec![n, d]);
        let vv = self.value(v);
        for b in 0..batch {
            for h in 0..heads {
                let pbase = (b * heads + h) * seq_len * seq_len;
                for t in 0..seq_len {
                    let qrow = b * seq_len + t;
                    let qs = &q_rot.data()[qrow * d + h * dh..qrow * d + h * dh + dh];
                    let prow = &mut probs[pbase + t * seq_len..pbase + t * seq_len + seq_len];
                    for u in 0..=t {
                        let krow = b * seq_len + u;
                        let ks = &k_rot.data()[krow * d + h * dh..krow * d + h * dh + dh];
                        prow[u] = dot(qs, ks) * scale;
                    }
                    softmax_in_place(&mut prow[..=t]);
                    let orow = qrow;
                    for u in 0..=t {
                        let w = match &drop_mask {
                            Some(m) => prow[u] * m[pbase + t * seq_len + u],
                            None => prow[u],
                        };
                        if w == 0.0 {
                            continue;
                        }
                        let vrow = b * seq_len + u;
                        let vs = vv.row(vrow);
                        let lo = orow * d + h * dh;
                        let od = &mut out.data_mut()[lo..lo + dh];
                        for j in 0..dh {
                            od[j] += w * vs[h * dh + j];
                        }
                    }
                }
            }
        }

        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            out,
            Op::CausalAttention { q, k, v, heads, seq_len, rope_base, probs, q_rot, k_rot, drop_mask },
            ng,
        ))
    }

    /// Same-length 1D convolution along the time axis with symmetric zero
    /// padding. `x` is [C_in, T]; `w` is [C_out, C_in, K] (K odd); `b` [C_out].
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        if !xv.is_matrix() || wv.shape().len() != 3 || bv.shape().len() != 1 {
            return Err(Error::Dimension(format!(
                "conv1d: x {:?}, w {:?}, b {:?}",
                xv.shape(),
                wv.shape(),
                bv.shape()
            )));
        }
        let (c_in, t_len) = (xv.rows(), xv.cols());
        let (c_out, w_in, ksize) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        if w_in != c_in || bv.len() != c_out {
            return Err(Error::Dimension(format!(
                "conv1d channel mismatch: x has {c_in} channels, w wants {w_in}, bias {}",
                bv.len()
            )));
        }
        if ksize % 2 == 0 {
            return Err(Error::Config(format!("conv kernel size must be odd, got {ksize}")));
        }
        let pad = ksize / 2;
        let mut out = Tensor::zeros(vec![c_out, t_len]);
        for o in 0..c_out {
            let bias = bv.data()[o];
            for t in 0..t_len {
                let mut acc = bias;
                for c in 0..c_in {
                    for kk in 0..ksize {
                        let s = t + kk;
                        if s < pad || s - pad >= t_len {
                            continue;
                        }
                        acc += wv.data()[(o * c_in + c) * ksize + kk] * xv.at2(c, s - pad);
                    }
                }
                out.data_mut()[o * t_len + t] = acc;
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(out, Op::Conv1d { x, w, b }, ng))
    }

    /// Inverted dropout (train time); pass rate 0 for identity.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if rate == 0.0 {
            return Ok(x);
        }
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must be in [0,1), got {rate}")));
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).len();
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.uniform() < rate { 0.0 } else { keep }).collect();
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        for (o, m) in t.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        let ng = self.needs(x);
        Ok(self.push(t, Op::Dropout { x, mask }, ng))
    }

    /// Mean over all entries of (a - b)^2.
    pub fn mean_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mean_sq_diff")?;
        let n = self.value(a).len() as f64;
        let mut acc = 0.0;
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = x - y;
            acc += d * d;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(acc / n), Op::MeanSqDiff(a, b), ng))
    }

    /// Mean over all entries of |a - b|.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mean_abs_diff")?;
        let n = self.value(a).len() as f64;
        let mut acc = 0.0;
        for (x, y) in self.value(a).data().iter().zip(self.value(b).data()) {
            acc += (x - y).abs();
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(acc / n), Op::MeanAbsDiff(a, b), ng))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let acc: f64 = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(acc / n), Op::MeanAll(x), ng)
    }

    /// Masked mean cross-entropy: -(sum_i mask_i * log softmax(logits_i)[target_i]) / sum(mask).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if !lv.is_matrix() {
            return Err(Error::Dimension(format!("cross_entropy wants rank-2 logits, got {:?}", lv.shape())));
        }
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {n} logit rows, {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Vocab(format!("target {bad} out of range (vocab {vocab})")));
        }
        let denom: f64 = mask.iter().sum();
        if !(denom > 0.0) {
            return Err(Error::Input("cross_entropy mask sums to zero".into()));
        }
        let mut probs = Tensor::zeros(vec![n, vocab]);
        let mut loss = 0.0;
        for r in 0..n {
            let row = &mut probs.data_mut()[r * vocab..(r + 1) * vocab];
            row.copy_from_slice(lv.row(r));
            softmax_in_place(row);
            if mask[r] != 0.0 {
                loss -= mask[r] * row[targets[r]].max(1e-300).ln();
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss / denom),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, denom },
            ng,
        ))
    }

    /// Stop-gradient: value copied, no gradient flows back.
    pub fn detach(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        t.requires_grad = false;
        { let _ = x; self.push(t, Op::Detach, false) }
    }

    /// Straight-through estimator: forward takes `value` (e.g. the quantized
    /// codes), backward routes the gradient unchanged to `grad_to` (the
    /// pre-quantization encoder output). Equivalent to grad_to + sg[value - grad_to].
    pub fn straight_through(&mut self, grad_to: Var, value: Tensor) -> Result<Var> {
        if value.shape() != self.value(grad_to).shape() {
            return Err(Error::Dimension(format!(
                "straight_through: value {:?} vs carrier {:?}",
                value.shape(),
                self.value(grad_to).shape()
            )));
        }
        let ng = self.needs(grad_to);
        Ok(self.push(value, Op::StraightThrough { grad_to }, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_matrix() {
            return Err(Error::Dimension(format!("slice_rows wants rank 2, got {:?}", xv.shape())));
        }
        if start + len > xv.rows() {
            return Err(Error::Dimension(format!(
                "slice_rows [{start}, {}) out of {} rows",
                start + len,
                xv.rows()
            )));
        }
        let c = xv.cols();
        let t = Tensor::new(vec![len, c], xv.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::SliceRows { x, start, len }, ng))
    }

    pub fn sum_vars(&mut self, vs: &[Var]) -> Result<Var> {
        let first = *vs.first().ok_or_else(|| Error::Input("sum_vars of nothing".into()))?;
        let mut t = self.value(first).clone();
        t.requires_grad = false;
        let mut ng = self.needs(first);
        for &v in &vs[1..] {
            self.same_shape(first, v, "sum_vars")?;
            for (o, x) in t.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
            ng |= self.needs(v);
        }
        Ok(self.push(t, Op::SumVars(vs.to_vec()), ng))
    }

    fn accumulate(&mut self, v: Var, delta: &Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (o, x) in g.data_mut().iter_mut().zip(delta.data()) {
                    *o += x;
                }
            }
            None => self.grads[v.0] = Some(delta.clone()),
        }
    }

    fn accumulate_fn(&mut self, v: Var, shape: &[usize], f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        if self.grads[v.0].is_none() {
            self.grads[v.0] = Some(Tensor::zeros(shape.to_vec()));
        }
        f(self.grads[v.0].as_mut().unwrap().data_mut());
    }

    /// Allocate a zero gradient buffer for `v` if absent.
    fn ensure_grad(&mut self, v: Var) {
        if self.grads[v.0].is_none() {
            let shape = self.nodes[v.0].value.shape().to_vec();
            self.grads[v.0] = Some(Tensor::zeros(shape));
        }
    }

    /// Reverse sweep from a scalar loss node. Gradients are then available
    /// via [`Graph::grad`] for every reachable node with `needs_grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward wants a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            let g = self.grads[i].take().unwrap();
            self.backward_one(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_one(&mut self, i: usize, g: &Tensor) -> Result<()> {
        // Reads of node values/ops happen through raw pointers scoped to this
        // call: `accumulate` only touches `self.grads`, never `self.nodes`.
        let node: *const Node = &self.nodes[i];
        let op = unsafe { &(*node).op };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                self.accumulate(b, g);
            }
            Op::AddRow(x, bias) => {
                let (x, bias) = (*x, *bias);
                self.accumulate(x, g);
                let cols = self.value(bias).len();
                let gd = g.data().to_vec();
                self.accumulate_fn(bias, &[cols], |bg| {
                    for (idx, v) in gd.iter().enumerate() {
                        bg[idx % cols] += v;
                    }
                });
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g);
                let mut neg = g.clone();
                for v in neg.data_mut() {
                    *v = -*v;
                }
                self.accumulate(b, &neg);
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let mut da = g.clone();
                for (o, x) in da.data_mut().iter_mut().zip(self.value(b).data()) {
                    *o *= x;
                }
                let mut db = g.clone();
                for (o, x) in db.data_mut().iter_mut().zip(self.value(a).data()) {
                    *o *= x;
                }
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                let mut da = g.clone();
                for v in da.data_mut() {
                    *v *= c;
                }
                self.accumulate(a, &da);
            }
            Op::Matmul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let (m, n) = (g.rows(), g.cols());
                let k = if ta { self.value(a).rows() } else { self.value(a).cols() };
                // With C = op(A)·op(B): d op(A) = G·op(B)^T, d op(B) = op(A)^T·G,
                // transposed back onto A/B when ta/tb are set.
                if self.needs(a) {
                    self.ensure_grad(a);
                    let bv: *const Tensor = &self.nodes[b.0].value;
                    let buf: *mut Tensor = self.grads[a.0].as_mut().unwrap();
                    unsafe {
                        match (ta, tb) {
                            (false, false) => matmul_into((*buf).data_mut(), g, &*bv, false, true, m, k, n, true),
                            (false, true) => matmul_into((*buf).data_mut(), g, &*bv, false, false, m, k, n, true),
                            (true, false) => matmul_into((*buf).data_mut(), &*bv, g, false, true, k, m, n, true),
                            (true, true) => matmul_into((*buf).data_mut(), &*bv, g, true, true, k, m, n, true),
                        }
                    }
                }
                if self.needs(b) {
                    self.ensure_grad(b);
                    let av: *const Tensor = &self.nodes[a.0].value;
                    let buf: *mut Tensor = self.grads[b.0].as_mut().unwrap();
                    unsafe {
                        match (ta, tb) {
                            (false, false) => matmul_into((*buf).data_mut(), &*av, g, true, false, k, n, m, true),
                            (true, false) => matmul_into((*buf).data_mut(), &*av, g, false, false, k, n, m, true),
                            (false, true) => matmul_into((*buf).data_mut(), g, &*av, true, false, n, k, m, true),
                            (true, true) => matmul_into((*buf).data_mut(), g, &*av, true, true, n, k, m, true),
                        }
                    }
                }
            }
            Op::Silu(x) => {
                let x = *x;
                let mut dx = g.clone();
                for (o, xv) in dx.data_mut().iter_mut().zip(self.value(x).data()) {
                    let s = 1.0 / (1.0 + (-xv).exp());
                    *o *= s * (1.0 + xv * (1.0 - s));
                }
                self.accumulate(x, &dx);
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let yv = unsafe { &(*node).value };
                let mut dx = g.clone();
                for (o, y) in dx.data_mut().iter_mut().zip(yv.data()) {
                    *o *= y * (1.0 - y);
                }
                self.accumulate(x, &dx);
            }
            Op::Tanh(x) => {
                let x = *x;
                let yv = unsafe { &(*node).value };
                let mut dx = g.clone();
                for (o, y) in dx.data_mut().iter_mut().zip(yv.data()) {
                    *o *= 1.0 - y * y;
                }
                self.accumulate(x, &dx);
            }
            Op::RmsNorm { x, gain, eps } => {
                let (x, gain, eps) = (*x, *gain, *eps);
                let xv = self.value(x);
                let gv = self.value(gain);
                let (n, c) = (xv.rows(), xv.cols());
                let mut dx = Tensor::zeros(vec![n, c]);
                let mut dg = vec![0.0; c];
                for r in 0..n {
                    let xr = xv.row(r);
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let ms: f64 = xr.iter().map(|v| v * v).sum::<f64>() / c as f64;
                    let inv = 1.0 / (ms + eps).sqrt();
                    let mut inner = 0.0;
                    for j in 0..c {
                        inner += gr[j] * gv.data()[j] * xr[j];
                    }
                    let coef = inv * inv * inv / c as f64 * inner;
                    let dxr = &mut dx.data_mut()[r * c..(r + 1) * c];
                    for j in 0..c {
                        dxr[j] = gr[j] * gv.data()[j] * inv - xr[j] * coef;
                        dg[j] += gr[j] * xr[j] * inv;
                    }
                }
                self.accumulate(x, &dx);
                let dgt = Tensor::new(vec![c], dg)?;
                self.accumulate(gain, &dgt);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let ids = ids.clone();
                let width = self.value(table).cols();
                let shape = self.value(table).shape().to_vec();
                let gd = g.data().to_vec();
                self.accumulate_fn(table, &shape, |tg| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..width {
                            tg[id * width + j] += gd[r * width + j];
                        }
                    }
                });
            }
            Op::CausalAttention { q, k, v, heads, seq_len, rope_base, probs, q_rot, k_rot, drop_mask } => {
                let (q, k, v) = (*q, *k, *v);
                let (heads, seq_len, rope_base) = (*heads, *seq_len, *rope_base);
                let d = self.value(q).cols();
                let dh = d / heads;
                let n = self.value(q).rows();
                let batch = n / seq_len;
                let scale = 1.0 / (dh as f64).sqrt();
                let vv: *const Tensor = self.value(v);
                let mut dq = Tensor::zeros(vec![n, d]);
                let mut dk = Tensor::zeros(vec![n, d]);
                let mut dv = Tensor::zeros(vec![n, d]);
                let mut dscores = vec![0.0; seq_len];
                for b in 0..batch {
                    for h in 0..heads {
                        let pbase = (b * heads + h) * seq_len * seq_len;
                        for t in 0..seq_len {
                            let orow = b * seq_len + t;
                            let gs = &g.data()[orow * d + h * dh..orow * d + h * dh + dh];
                            let prow = &probs[pbase + t * seq_len..pbase + t * seq_len + seq_len];
                            // dv and d(probs-after-dropout)
                            let mut dpd = vec![0.0; t + 1];
                            for u in 0..=t {
                                let vrow = b * seq_len + u;
                                let vs = unsafe { (*vv).row(vrow) };
                                let w = match drop_mask {
                                    Some(m) => prow[u] * m[pbase + t * seq_len + u],
                                    None => prow[u],
                                };
                                let dvr = &mut dv.data_mut()[vrow * d + h * dh..vrow * d + h * dh + dh];
                                let mut acc = 0.0;
                                for j in 0..dh {
                                    dvr[j] += w * gs[j];
                                    acc += gs[j] * vs[h * dh + j];
                                }
                                dpd[u] = acc;
                            }
                            // Through dropout then softmax.
                            let mut inner = 0.0;
                            for u in 0..=t {
                                let dp = match drop_mask {
                                    Some(m) => dpd[u] * m[pbase + t * seq_len + u],
                                    None => dpd[u],
                                };
                                dpd[u] = dp;
                                inner += prow[u] * dp;
                            }
                            for u in 0..=t {
                                dscores[u] = prow[u] * (dpd[u] - inner);
                            }
                            // dq_rot row t and dk_rot rows 0..=t.
                            let qrow = b * seq_len + t;
                            let qs = &q_rot.data()[qrow * d + h * dh..qrow * d + h * dh + dh];
                            let dqr = &mut dq.data_mut()[qrow * d + h * dh..qrow * d + h * dh + dh];
                            for u in 0..=t {
                                let ds = dscores[u] * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = b * seq_len + u;
                                let ks = &k_rot.data()[krow * d + h * dh..krow * d + h * dh + dh];
                                for j in 0..dh {
                                    dqr[j] += ds * ks[j];
                                }
                                let dkr = &mut dk.data_mut()[krow * d + h * dh..krow * d + h * dh + dh];
                                for j in 0..dh {
                                    dkr[j] += ds * qs[j];
                                }
                            }
                        }
                    }
                }
                // Undo the rotation: gradients rotate by the negative angle.
                for row in 0..n {
                    let pos = (row % seq_len) as f64;
                    for h in 0..heads {
                        let lo = row * d + h * dh;
                        rope_rotate_in_place(&mut dq.data_mut()[lo..lo + dh], -pos, rope_base);
                        rope_rotate_in_place(&mut dk.data_mut()[lo..lo + dh], -pos, rope_base);
                    }
                }
                self.accumulate(q, &dq);
                self.accumulate(k, &dk);
                self.accumulate(v, &dv);
            }
            Op::Conv1d { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let xv: *const Tensor = self.value(x);
                let wv: *const Tensor = self.value(w);
                let (c_in, t_len) = unsafe { ((*xv).rows(), (*xv).cols()) };
                let (c_out, ksize) = unsafe { ((*wv).shape()[0], (*wv).shape()[2]) };
                let pad = ksize / 2;
                // db
                let mut db = vec![0.0; c_out];
                for o in 0..c_out {
                    for t in 0..t_len {
                        db[o] += g.data()[o * t_len + t];
                    }
                }
                let dbt = Tensor::new(vec![c_out], db)?;
                self.accumulate(b, &dbt);
                // dw
                if self.needs(w) {
                    let mut dw = Tensor::zeros(vec![c_out, c_in, ksize]);
                    for o in 0..c_out {
                        for t in 0..t_len {
                            let gv = g.data()[o * t_len + t];
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                for kk in 0..ksize {
                                    let s = t + kk;
                                    if s < pad || s - pad >= t_len {
                                        continue;
                                    }
                                    dw.data_mut()[(o * c_in + c) * ksize + kk] +=
                                        gv * unsafe { (*xv).at2(c, s - pad) };
                                }
                            }
                        }
                    }
                    self.accumulate(w, &dw);
                }
                // dx
                if self.needs(x) {
                    let mut dx = Tensor::zeros(vec![c_in, t_len]);
                    for o in 0..c_out {
                        for t in 0..t_len {
                            let gv = g.data()[o * t_len + t];
                            if gv == 0.0 {
                                continue;
                            }
                            for c in 0..c_in {
                                for kk in 0..ksize {
                                    let s = t + kk;
                                    if s < pad || s - pad >= t_len {
                                        continue;
                                    }
                                    dx.data_mut()[c * t_len + (s - pad)] +=
                                        gv * unsafe { (*wv).data()[(o * c_in + c) * ksize + kk] };
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let mut dx = g.clone();
                for (o, m) in dx.data_mut().iter_mut().zip(mask) {
                    *o *= m;
                }
                self.accumulate(x, &dx);
            }
            Op::MeanSqDiff(a, b) => {
                let (a, b) = (*a, *b);
                let gs = g.data()[0];
                let n = self.value(a).len() as f64;
                let av: *const Tensor = self.value(a);
                let bv: *const Tensor = self.value(b);
                let mut da = Tensor::zeros(self.value(a).shape().to_vec());
                unsafe {
                    for ((o, x), y) in da.data_mut().iter_mut().zip((*av).data()).zip((*bv).data()) {
                        *o = gs * 2.0 * (x - y) / n;
                    }
                }
                self.accumulate(a, &da);
                for v in da.data_mut() {
                    *v = -*v;
                }
                self.accumulate(b, &da);
            }
            Op::MeanAbsDiff(a, b) => {
                let (a, b) = (*a, *b);
                let gs = g.data()[0];
                let n = self.value(a).len() as f64;
                let av: *const Tensor = self.value(a);
                let bv: *const Tensor = self.value(b);
                let mut da = Tensor::zeros(self.value(a).shape().to_vec());
                unsafe {
                    for ((o, x), y) in da.data_mut().iter_mut().zip((*av).data()).zip((*bv).data()) {
                        *o = gs * (x - y).signum() / n;
                    }
                }
                self.accumulate(a, &da);
                for v in da.data_mut() {
                    *v = -*v;
                }
                self.accumulate(b, &da);
            }
            Op::MeanAll(x) => {
                let x = *x;
                let gs = g.data()[0];
                let n = self.value(x).len() as f64;
                let da = Tensor::full(self.value(x).shape().to_vec(), gs / n);
                self.accumulate(x, &da);
            }
            Op::CrossEntropy { logits, targets, mask, probs, denom } => {
                let logits = *logits;
                let gs = g.data()[0];
                let (n, vocab) = (probs.rows(), probs.cols());
                let mut dl = Tensor::zeros(vec![n, vocab]);
                for r in 0..n {
                    if mask[r] == 0.0 {
                        continue;
                    }
                    let coef = gs * mask[r] / denom;
                    let pr = probs.row(r);
                    let dr = &mut dl.data_mut()[r * vocab..(r + 1) * vocab];
                    for j in 0..vocab {
                        dr[j] = coef * pr[j];
                    }
                    dr[targets[r]] -= coef;
                }
                self.accumulate(logits, &dl);
            }
            Op::Detach => {}
            Op::StraightThrough { grad_to } => {
                let grad_to = *grad_to;
                self.accumulate(grad_to, g);
            }
            Op::SliceRows { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let c = self.value(x).cols();
                let shape = self.value(x).shape().to_vec();
                let gd = g.data().to_vec();
                self.accumulate_fn(x, &shape, |xg| {
                    xg[start * c..(start + len) * c]
                        .iter_mut()
                        .zip(&gd)
                        .for_each(|(o, v)| *o += v);
                });
            }
            Op::SumVars(vs) => {
                for &v in vs.clone().iter() {
                    self.accumulate(v, g);
                }
            }
        }
        Ok(())
    }
}
