//! Reverse-mode autodiff over an eager operation tape.
//!
//! Every operation computes its value immediately and appends one node to the
//! tape; node ids are therefore already a topological order, and the backward
//! pass is a single reverse sweep. Gradients are accumulated per node and read
//! back with [`Tape::grad`]. Unused parameters receive zero gradient.

use super::{matmul_raw, sigmoid, softplus, transpose_raw, Tensor};
use crate::error::{MsgmError, Result};

/// Index of a value on the tape.
pub type VarId = usize;

enum Op {
    Leaf,
    Matmul { a: VarId, b: VarId, m: usize, k: usize, n: usize },
    Add { a: VarId, b: VarId },
    Sub { a: VarId, b: VarId },
    Mul { a: VarId, b: VarId },
    Scale { x: VarId, c: f64 },
    AddBias { x: VarId, bias: VarId },
    Reshape { x: VarId },
    Narrow0 { x: VarId, start_elems: usize, len_elems: usize },
    SliceLast { x: VarId, width: usize, start: usize, len: usize },
    SwapLast2 { x: VarId, lead: usize, rows: usize, cols: usize },
    Relu { x: VarId },
    Silu { x: VarId },
    Softplus { x: VarId },
    SumAll { x: VarId },
    MeanAxis1 { x: VarId, d0: usize, d1: usize, d2: usize },
    RowSums { x: VarId, rows: usize, cols: usize },
    InvSqrtDegree { x: VarId },
    ScaleRowsCols { a: VarId, r: VarId, n: usize },
    NormalizeVec { x: VarId },
    ScalarRecip { x: VarId, num: f64 },
    ScaleByVar { x: VarId, s: VarId },
    GraphProject { a: VarId, mask: Option<Vec<bool>>, n: usize },
    GraphMix { t: VarId, f: VarId, m: usize, c: usize, fd: usize },
    DepthwiseConv1d { x: VarId, k: VarId, b: usize, d: usize, n: usize },
    RmsNorm { x: VarId, w: VarId, eps: f64 },
    L2NormalizeRows { x: VarId, guard: f64 },
    SmoothedCrossEntropy { logits: VarId, labels: Vec<usize>, smoothing: f64 },
    SelectiveScan {
        u: VarId,
        delta: VarId,
        a_log: VarId,
        b_seq: VarId,
        c_seq: VarId,
        d: VarId,
        dims: (usize, usize, usize, usize), // (b, n, d_inner, d_state)
        states: Vec<f64>,                   // saved forward states, b×n×d_inner×d_state
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of operations; replayed in reverse for gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input or parameter value.
    pub fn leaf(&mut self, t: Tensor) -> VarId {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> VarId {
        debug_assert!(value.is_finite(), "non-finite value produced on tape");
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn data(&self, id: VarId) -> &[f64] {
        self.nodes[id].value.data()
    }

    // ── Operations ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(MsgmError::shape(
                "matmul",
                format!("cannot multiply {sa:?} by {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out), Op::Matmul { a, b, m, k, n }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.require_same_shape("add", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out), Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.require_same_shape("sub", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out), Op::Sub { a, b }))
    }

    /// Elementwise product; shapes must match exactly (no broadcasting).
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.require_same_shape("mul", a, b)?;
        let out: Vec<f64> = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out), Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: VarId, c: f64) -> VarId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * c).collect();
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::Scale { x, c })
    }

    /// Bias-add along the last dimension: the one sanctioned broadcast.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let h = *self.shape(x).last().unwrap();
        if self.shape(bias) != [h] {
            return Err(MsgmError::shape(
                "add_bias",
                format!("bias {:?} does not match last dim of {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let bd = self.data(bias).to_vec();
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bd[i % h])
            .collect();
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out), Op::AddBias { x, bias }))
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let t = self.nodes[x].value.reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Contiguous slice along the first axis.
    pub fn narrow0(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let s = self.shape(x).to_vec();
        if start + len > s[0] {
            return Err(MsgmError::shape(
                "narrow0",
                format!("range {start}..{} out of bounds for first dim {}", start + len, s[0]),
            ));
        }
        let stride: usize = s[1..].iter().product();
        let mut shape = s.clone();
        shape[0] = len;
        let data = self.data(x)[start * stride..(start + len) * stride].to_vec();
        Ok(self.push(
            Tensor::new(shape, data),
            Op::Narrow0 { x, start_elems: start * stride, len_elems: len * stride },
        ))
    }

    /// Slice `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let s = self.shape(x).to_vec();
        let width = *s.last().unwrap();
        if start + len > width {
            return Err(MsgmError::shape(
                "slice_last",
                format!("range {start}..{} out of bounds for last dim {width}", start + len),
            ));
        }
        let rows = self.data(x).len() / width;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&self.data(x)[r * width + start..r * width + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::new(shape, out), Op::SliceLast { x, width, start, len }))
    }

    /// Transpose the last two axes.
    pub fn swap_last2(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(MsgmError::shape("swap_last2", format!("need rank >= 2, got {s:?}")));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let lead: usize = s[..s.len() - 2].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for l in 0..lead {
            let base = l * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[base + j * rows + i] = xd[base + i * cols + j];
                }
            }
        }
        let mut shape = s;
        let sl = shape.len();
        shape.swap(sl - 2, sl - 1);
        Ok(self.push(Tensor::new(shape, out), Op::SwapLast2 { x, lead, rows, cols }))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.max(0.0)).collect();
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::Relu { x })
    }

    /// x * sigmoid(x).
    pub fn silu(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::Silu { x })
    }

    /// ln(1 + e^x), overflow-safe.
    pub fn softplus(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| softplus(v)).collect();
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::Softplus { x })
    }

    pub fn sum_all(&mut self, x: VarId) -> VarId {
        let s: f64 = self.data(x).iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x })
    }

    /// Mean over the middle axis of a rank-3 tensor: (a, b, c) -> (a, c).
    pub fn mean_axis1(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(MsgmError::shape("mean_axis1", format!("need rank 3, got {s:?}")));
        }
        let (d0, d1, d2) = (s[0], s[1], s[2]);
        let xd = self.data(x);
        let mut out = vec![0.0; d0 * d2];
        for i in 0..d0 {
            for j in 0..d1 {
                for k in 0..d2 {
                    out[i * d2 + k] += xd[(i * d1 + j) * d2 + k];
                }
            }
        }
        for v in out.iter_mut() {
            *v /= d1 as f64;
        }
        Ok(self.push(Tensor::new(vec![d0, d2], out), Op::MeanAxis1 { x, d0, d1, d2 }))
    }

    /// Row sums of a matrix: (r, c) -> (r).
    pub fn row_sums(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(MsgmError::shape("row_sums", format!("need rank 2, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let xd = self.data(x);
        let out: Vec<f64> = (0..rows).map(|i| xd[i * cols..(i + 1) * cols].iter().sum()).collect();
        Ok(self.push(Tensor::new(vec![rows], out), Op::RowSums { x, rows, cols }))
    }

    /// Per-entry d^(-1/2) with non-positive degrees treated as 1 (isolated nodes).
    pub fn inv_sqrt_degree(&mut self, x: VarId) -> VarId {
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 1.0 })
            .collect();
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::InvSqrtDegree { x })
    }

    /// out_ij = r_i * a_ij * r_j for a square matrix and a vector.
    pub fn scale_rows_cols(&mut self, a: VarId, r: VarId) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        let n = s[0];
        if s.len() != 2 || s[0] != s[1] || self.shape(r) != [n] {
            return Err(MsgmError::shape(
                "scale_rows_cols",
                format!("need square matrix and matching vector, got {s:?} and {:?}", self.shape(r)),
            ));
        }
        let ad = self.data(a);
        let rd = self.data(r);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = rd[i] * ad[i * n + j] * rd[j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, n], out), Op::ScaleRowsCols { a, r, n }))
    }

    /// x / ||x||_2 over the whole storage (used by power iteration).
    pub fn normalize_vec(&mut self, x: VarId) -> VarId {
        let nrm = self.data(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        let out: Vec<f64> = if nrm > 1e-300 {
            self.data(x).iter().map(|v| v / nrm).collect()
        } else {
            self.data(x).to_vec()
        };
        self.push(Tensor::new(self.shape(x).to_vec(), out), Op::NormalizeVec { x })
    }

    /// num / x for a scalar variable.
    pub fn scalar_recip(&mut self, x: VarId, num: f64) -> Result<VarId> {
        if self.data(x).len() != 1 {
            return Err(MsgmError::shape("scalar_recip", "input must be scalar".to_string()));
        }
        let v = num / self.data(x)[0];
        Ok(self.push(Tensor::scalar(v), Op::ScalarRecip { x, num }))
    }

    /// Tensor times a scalar tape variable.
    pub fn scale_by_var(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if self.data(s).len() != 1 {
            return Err(MsgmError::shape("scale_by_var", "scale must be scalar".to_string()));
        }
        let sv = self.data(s)[0];
        let out: Vec<f64> = self.data(x).iter().map(|v| v * sv).collect();
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out), Op::ScaleByVar { x, s }))
    }

    /// Symmetrize, optionally mask, and zero the diagonal of a square matrix:
    /// out = zero_diag(mask ∘ (A + Aᵀ)/2). The projection the model applies to
    /// adjacency parameters on every forward pass.
    pub fn graph_project(&mut self, a: VarId, mask: Option<&[bool]>) -> Result<VarId> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != s[1] {
            return Err(MsgmError::shape("graph_project", format!("need square matrix, got {s:?}")));
        }
        let n = s[0];
        if let Some(m) = mask {
            if m.len() != n * n {
                return Err(MsgmError::shape(
                    "graph_project",
                    format!("mask length {} does not match {n}x{n}", m.len()),
                ));
            }
        }
        let ad = self.data(a);
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let keep = mask.map_or(true, |m| m[i * n + j]);
                if keep {
                    out[i * n + j] = 0.5 * (ad[i * n + j] + ad[j * n + i]);
                }
            }
        }
        Ok(self.push(
            Tensor::new(vec![n, n], out),
            Op::GraphProject { a, mask: mask.map(|m| m.to_vec()), n },
        ))
    }

    /// Apply a shared square matrix to every sample of a batched feature
    /// tensor: out[s] = T · F[s] for F of shape (m, c, fd) and T of shape (c, c).
    pub fn graph_mix(&mut self, t: VarId, f: VarId) -> Result<VarId> {
        let st = self.shape(t).to_vec();
        let sf = self.shape(f).to_vec();
        if st.len() != 2 || st[0] != st[1] || sf.len() != 3 || sf[1] != st[0] {
            return Err(MsgmError::shape(
                "graph_mix",
                format!("need (c,c) and (m,c,f), got {st:?} and {sf:?}"),
            ));
        }
        let (m, c, fd) = (sf[0], sf[1], sf[2]);
        let td = self.data(t);
        let fdat = self.data(f);
        let mut out = vec![0.0; m * c * fd];
        for s in 0..m {
            let fs = &fdat[s * c * fd..(s + 1) * c * fd];
            let os = &mut out[s * c * fd..(s + 1) * c * fd];
            for i in 0..c {
                for p in 0..c {
                    let tv = td[i * c + p];
                    if tv == 0.0 {
                        continue;
                    }
                    for k in 0..fd {
                        os[i * fd + k] += tv * fs[p * fd + k];
                    }
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, c, fd], out), Op::GraphMix { t, f, m, c, fd }))
    }

    /// Depthwise 1-D convolution with kernel width 4, three zeros padded on
    /// each side and the output trimmed to the first n positions. Under this
    /// convention out[t] = Σ_j k[j]·x[t-3+j], so position t only sees x[..=t].
    pub fn depthwise_conv1d(&mut self, x: VarId, k: VarId) -> Result<VarId> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sx.len() != 3 {
            return Err(MsgmError::shape("depthwise_conv1d", format!("need (b,d,n) input, got {sx:?}")));
        }
        let (b, d, n) = (sx[0], sx[1], sx[2]);
        if sk != [d, 4] {
            return Err(MsgmError::shape(
                "depthwise_conv1d",
                format!("kernel must be ({d},4) to match input {sx:?}, got {sk:?}"),
            ));
        }
        let xd = self.data(x);
        let kd = self.data(k);
        let mut out = vec![0.0; b * d * n];
        for bi in 0..b {
            for di in 0..d {
                let xrow = &xd[(bi * d + di) * n..(bi * d + di + 1) * n];
                let krow = &kd[di * 4..di * 4 + 4];
                let orow = &mut out[(bi * d + di) * n..(bi * d + di + 1) * n];
                for (t, o) in orow.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (j, &kv) in krow.iter().enumerate() {
                        let src = t as isize - 3 + j as isize;
                        if src >= 0 && (src as usize) < n {
                            acc += kv * xrow[src as usize];
                        }
                    }
                    *o = acc;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![b, d, n], out), Op::DepthwiseConv1d { x, k, b, d, n }))
    }

    /// RMS normalization over the last axis: z * rsqrt(mean(z²) + eps) * w.
    pub fn rmsnorm(&mut self, x: VarId, w: VarId, eps: f64) -> Result<VarId> {
        let s = self.shape(x).to_vec();
        let h = *s.last().unwrap();
        if self.shape(w) != [h] {
            return Err(MsgmError::shape(
                "rmsnorm",
                format!("weight {:?} does not match last dim of {s:?}", self.shape(w)),
            ));
        }
        let xd = self.data(x);
        let wd = self.data(w).to_vec();
        let rows = xd.len() / h;
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * h..(r + 1) * h];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / h as f64;
            let rs = 1.0 / (ms + eps).sqrt();
            for i in 0..h {
                out[r * h + i] = row[i] * rs * wd[i];
            }
        }
        Ok(self.push(Tensor::new(s, out), Op::RmsNorm { x, w, eps }))
    }

    /// Per-row v / max(||v||₂, guard).
    pub fn l2_normalize_rows(&mut self, x: VarId, guard: f64) -> Result<VarId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(MsgmError::shape("l2_normalize_rows", format!("need rank 2, got {s:?}")));
        }
        let (rows, h) = (s[0], s[1]);
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * h..(r + 1) * h];
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(guard);
            for i in 0..h {
                out[r * h + i] = row[i] / nrm;
            }
        }
        Ok(self.push(Tensor::new(s, out), Op::L2NormalizeRows { x, guard }))
    }

    /// Softmax cross-entropy against label-smoothed targets, mean over the
    /// batch: the true class gets 1-s, every other class s/(d_out-1).
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: VarId,
        labels: &[usize],
        smoothing: f64,
    ) -> Result<VarId> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(MsgmError::shape("smoothed_cross_entropy", format!("need (b,d) logits, got {s:?}")));
        }
        let (b, d) = (s[0], s[1]);
        if d < 2 {
            return Err(MsgmError::Config(format!("need at least 2 classes, got {d}")));
        }
        if labels.len() != b {
            return Err(MsgmError::shape(
                "smoothed_cross_entropy",
                format!("{} labels for batch of {b}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= d) {
            return Err(MsgmError::Data(format!("label {bad} out of range for {d} classes")));
        }
        let ld = self.data(logits);
        let mut loss = 0.0;
        for (r, &lab) in labels.iter().enumerate() {
            let row = &ld[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            for (c, &logit) in row.iter().enumerate() {
                let q = if c == lab { 1.0 - smoothing } else { smoothing / (d as f64 - 1.0) };
                loss -= q * (logit - lse);
            }
        }
        loss /= b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SmoothedCrossEntropy { logits, labels: labels.to_vec(), smoothing },
        ))
    }

    /// Selective state-space scan (Mamba core recurrence).
    ///
    /// Per step t: x_t = exp(Δ_t ⊙ A)·x_{t-1} + (Δ_t ⊙ B_t)·v_t and
    /// y_t = C_t·x_t + D ⊙ v_t, with A = -exp(a_log) applied internally so the
    /// transition is always contractive. Sequential in t by construction.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: VarId,
        delta: VarId,
        a_log: VarId,
        b_seq: VarId,
        c_seq: VarId,
        d: VarId,
    ) -> Result<VarId> {
        let su = self.shape(u).to_vec();
        if su.len() != 3 {
            return Err(MsgmError::shape("selective_scan", format!("need (b,n,d_inner) input, got {su:?}")));
        }
        let (b, n, di) = (su[0], su[1], su[2]);
        let sa = self.shape(a_log).to_vec();
        if sa.len() != 2 || sa[0] != di {
            return Err(MsgmError::shape(
                "selective_scan",
                format!("a_log must be ({di}, d_state), got {sa:?}"),
            ));
        }
        let ds = sa[1];
        if self.shape(delta) != [b, n, di] {
            return Err(MsgmError::shape(
                "selective_scan",
                format!("delta shape {:?} != {:?}", self.shape(delta), [b, n, di]),
            ));
        }
        if self.shape(b_seq) != [b, n, ds] || self.shape(c_seq) != [b, n, ds] {
            return Err(MsgmError::shape(
                "selective_scan",
                format!("B/C must be ({b},{n},{ds})"),
            ));
        }
        if self.shape(d) != [di] {
            return Err(MsgmError::shape("selective_scan", format!("D must be ({di})")));
        }
        if let Some(&bad) = self.data(delta).iter().find(|&&v| v <= 0.0) {
            return Err(MsgmError::contract(
                "selective_scan",
                format!("delta must be strictly positive, found {bad}"),
            ));
        }

        let a: Vec<f64> = self.data(a_log).iter().map(|&v| -v.exp()).collect();
        let (y, states) = scan_forward(
            self.data(u),
            self.data(delta),
            &a,
            self.data(b_seq),
            self.data(c_seq),
            self.data(d),
            b,
            n,
            di,
            ds,
            true,
        );
        Ok(self.push(
            Tensor::new(vec![b, n, di], y),
            Op::SelectiveScan {
                u,
                delta,
                a_log,
                b_seq,
                c_seq,
                d,
                dims: (b, n, di, ds),
                states: states.expect("states requested"),
            },
        ))
    }

    fn require_same_shape(&self, op: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(MsgmError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every node
    /// the loss depends on; parameters the loss never touched read back zero.
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(MsgmError::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss] = Some(vec![1.0]);
        for id in (0..self.nodes.len()).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    /// Gradient of the most recent backward pass; zeros if none flowed.
    pub fn grad(&self, id: VarId) -> Tensor {
        let shape = self.shape(id).to_vec();
        match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    fn accumulate(&mut self, id: VarId, contrib: &[f64]) {
        match &mut self.grads[id] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            None => self.grads[id] = Some(contrib.to_vec()),
        }
    }

    fn step_backward(&mut self, id: VarId) {
        let g = self.grads[id].clone().expect("gradient present");
        // The borrow checker cannot see that `op` never aliases grads, so the
        // op is matched by reference with data copied out where needed.
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let bt = transpose_raw(self.data(b), k, n);
                let da = matmul_raw(&g, &bt, m, n, k);
                let at = transpose_raw(self.data(a), m, k);
                let db = matmul_raw(&at, &g, k, m, n);
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, &g);
                self.accumulate(b, &g);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.accumulate(a, &g);
                self.accumulate(b, &neg);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da: Vec<f64> = g.iter().zip(self.data(b)).map(|(gv, bv)| gv * bv).collect();
                let db: Vec<f64> = g.iter().zip(self.data(a)).map(|(gv, av)| gv * av).collect();
                self.accumulate(a, &da);
                self.accumulate(b, &db);
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.accumulate(x, &dx);
            }
            Op::AddBias { x, bias } => {
                let (x, bias) = (*x, *bias);
                let h = self.data(bias).len();
                let mut db = vec![0.0; h];
                for (i, gv) in g.iter().enumerate() {
                    db[i % h] += gv;
                }
                self.accumulate(x, &g);
                self.accumulate(bias, &db);
            }
            Op::Reshape { x } => {
                let x = *x;
                self.accumulate(x, &g);
            }
            Op::Narrow0 { x, start_elems, len_elems } => {
                let (x, start, len) = (*x, *start_elems, *len_elems);
                let mut dx = vec![0.0; self.data(x).len()];
                dx[start..start + len].copy_from_slice(&g);
                self.accumulate(x, &dx);
            }
            Op::SliceLast { x, width, start, len } => {
                let (x, width, start, len) = (*x, *width, *start, *len);
                let mut dx = vec![0.0; self.data(x).len()];
                let rows = dx.len() / width;
                for r in 0..rows {
                    dx[r * width + start..r * width + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.accumulate(x, &dx);
            }
            Op::SwapLast2 { x, lead, rows, cols } => {
                let (x, lead, rows, cols) = (*x, *lead, *rows, *cols);
                let mut dx = vec![0.0; g.len()];
                for l in 0..lead {
                    let base = l * rows * cols;
                    for i in 0..rows {
                        for j in 0..cols {
                            dx[base + i * cols + j] = g[base + j * rows + i];
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::Relu { x } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Silu { x } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| {
                        let s = sigmoid(xv);
                        gv * (s + xv * s * (1.0 - s))
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::Softplus { x } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &xv)| gv * sigmoid(xv))
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::SumAll { x } => {
                let x = *x;
                let dx = vec![g[0]; self.data(x).len()];
                self.accumulate(x, &dx);
            }
            Op::MeanAxis1 { x, d0, d1, d2 } => {
                let (x, d0, d1, d2) = (*x, *d0, *d1, *d2);
                let inv = 1.0 / d1 as f64;
                let mut dx = vec![0.0; d0 * d1 * d2];
                for i in 0..d0 {
                    for j in 0..d1 {
                        for k in 0..d2 {
                            dx[(i * d1 + j) * d2 + k] = g[i * d2 + k] * inv;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::RowSums { x, rows, cols } => {
                let (x, rows, cols) = (*x, *rows, *cols);
                let mut dx = vec![0.0; rows * cols];
                for i in 0..rows {
                    for j in 0..cols {
                        dx[i * cols + j] = g[i];
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::InvSqrtDegree { x } => {
                let x = *x;
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(gv, &dv)| {
                        if dv > 0.0 {
                            gv * (-0.5) * dv.powf(-1.5)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(x, &dx);
            }
            Op::ScaleRowsCols { a, r, n } => {
                let (a, r, n) = (*a, *r, *n);
                let ad = self.data(a).to_vec();
                let rd = self.data(r).to_vec();
                let mut da = vec![0.0; n * n];
                let mut dr = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        da[i * n + j] = gv * rd[i] * rd[j];
                        dr[i] += gv * ad[i * n + j] * rd[j];
                        dr[j] += gv * ad[i * n + j] * rd[i];
                    }
                }
                self.accumulate(a, &da);
                self.accumulate(r, &dr);
            }
            Op::NormalizeVec { x } => {
                let x = *x;
                let xd = self.data(x);
                let nrm = xd.iter().map(|v| v * v).sum::<f64>().sqrt();
                if nrm > 1e-300 {
                    let y: Vec<f64> = xd.iter().map(|v| v / nrm).collect();
                    let dot: f64 = g.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                    let dx: Vec<f64> = g
                        .iter()
                        .zip(y.iter())
                        .map(|(gv, yv)| (gv - yv * dot) / nrm)
                        .collect();
                    self.accumulate(x, &dx);
                } else {
                    self.accumulate(x, &g);
                }
            }
            Op::ScalarRecip { x, num } => {
                let (x, num) = (*x, *num);
                let xv = self.data(x)[0];
                let dx = vec![g[0] * (-num / (xv * xv))];
                self.accumulate(x, &dx);
            }
            Op::ScaleByVar { x, s } => {
                let (x, s) = (*x, *s);
                let sv = self.data(s)[0];
                let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                let ds: f64 = g.iter().zip(self.data(x)).map(|(gv, xv)| gv * xv).sum();
                self.accumulate(x, &dx);
                self.accumulate(s, &[ds]);
            }
            Op::GraphProject { a, mask, n } => {
                let (a, n) = (*a, *n);
                let mask = mask.clone();
                let mut da = vec![0.0; n * n];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let keep = mask.as_ref().map_or(true, |m| m[i * n + j]);
                        if keep {
                            // out_ij = (a_ij + a_ji)/2
                            da[i * n + j] += 0.5 * g[i * n + j];
                            da[j * n + i] += 0.5 * g[i * n + j];
                        }
                    }
                }
                self.accumulate(a, &da);
            }
            Op::GraphMix { t, f, m, c, fd } => {
                let (t, f, m, c, fd) = (*t, *f, *m, *c, *fd);
                let td = self.data(t).to_vec();
                let fdat = self.data(f).to_vec();
                let mut dt = vec![0.0; c * c];
                let mut df = vec![0.0; m * c * fd];
                for s in 0..m {
                    let gs = &g[s * c * fd..(s + 1) * c * fd];
                    let fs = &fdat[s * c * fd..(s + 1) * c * fd];
                    let dfs = &mut df[s * c * fd..(s + 1) * c * fd];
                    for i in 0..c {
                        for p in 0..c {
                            let mut acc = 0.0;
                            for k in 0..fd {
                                acc += gs[i * fd + k] * fs[p * fd + k];
                                dfs[p * fd + k] += td[i * c + p] * gs[i * fd + k];
                            }
                            dt[i * c + p] += acc;
                        }
                    }
                }
                self.accumulate(t, &dt);
                self.accumulate(f, &df);
            }
            Op::DepthwiseConv1d { x, k, b, d, n } => {
                let (x, k, b, d, n) = (*x, *k, *b, *d, *n);
                let xd = self.data(x).to_vec();
                let kd = self.data(k).to_vec();
                let mut dx = vec![0.0; b * d * n];
                let mut dk = vec![0.0; d * 4];
                for bi in 0..b {
                    for di in 0..d {
                        let base = (bi * d + di) * n;
                        for t in 0..n {
                            let gv = g[base + t];
                            if gv == 0.0 {
                                continue;
                            }
                            for j in 0..4 {
                                let src = t as isize - 3 + j as isize;
                                if src >= 0 && (src as usize) < n {
                                    dx[base + src as usize] += gv * kd[di * 4 + j];
                                    dk[di * 4 + j] += gv * xd[base + src as usize];
                                }
                            }
                        }
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(k, &dk);
            }
            Op::RmsNorm { x, w, eps } => {
                let (x, w, eps) = (*x, *w, *eps);
                let xd = self.data(x).to_vec();
                let wd = self.data(w).to_vec();
                let h = wd.len();
                let rows = xd.len() / h;
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; h];
                for r in 0..rows {
                    let row = &xd[r * h..(r + 1) * h];
                    let grow = &g[r * h..(r + 1) * h];
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / h as f64;
                    let rs = 1.0 / (ms + eps).sqrt();
                    let inner: f64 = (0..h).map(|i| grow[i] * wd[i] * row[i]).sum();
                    let coef = -rs.powi(3) / h as f64 * inner;
                    for i in 0..h {
                        dx[r * h + i] = grow[i] * rs * wd[i] + coef * row[i];
                        dw[i] += grow[i] * row[i] * rs;
                    }
                }
                self.accumulate(x, &dx);
                self.accumulate(w, &dw);
            }
            Op::L2NormalizeRows { x, guard } => {
                let (x, guard) = (*x, *guard);
                let xd = self.data(x).to_vec();
                let s = self.shape(x).to_vec();
                let (rows, h) = (s[0], s[1]);
                let mut dx = vec![0.0; xd.len()];
                for r in 0..rows {
                    let row = &xd[r * h..(r + 1) * h];
                    let grow = &g[r * h..(r + 1) * h];
                    let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if nrm > guard {
                        let y: Vec<f64> = row.iter().map(|v| v / nrm).collect();
                        let dot: f64 = grow.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
                        for i in 0..h {
                            dx[r * h + i] = (grow[i] - y[i] * dot) / nrm;
                        }
                    } else {
                        for i in 0..h {
                            dx[r * h + i] = grow[i] / guard;
                        }
                    }
                }
                self.accumulate(x, &dx);
            }
            Op::SmoothedCrossEntropy { logits, labels, smoothing } => {
                let logits = *logits;
                let labels = labels.clone();
                let smoothing = *smoothing;
                let s = self.shape(logits).to_vec();
                let (b, d) = (s[0], s[1]);
                let ld = self.data(logits).to_vec();
                let scale = g[0] / b as f64;
                let mut dl = vec![0.0; b * d];
                for (r, &lab) in labels.iter().enumerate() {
                    let row = &ld[r * d..(r + 1) * d];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for c in 0..d {
                        let p = exps[c] / sum;
                        let q = if c == lab { 1.0 - smoothing } else { smoothing / (d as f64 - 1.0) };
                        dl[r * d + c] = scale * (p - q);
                    }
                }
                self.accumulate(logits, &dl);
            }
            Op::SelectiveScan { u, delta, a_log, b_seq, c_seq, d, dims, states } => {
                let (u, delta, a_log, b_seq, c_seq, d) = (*u, *delta, *a_log, *b_seq, *c_seq, *d);
                let (bsz, n, di, ds) = *dims;
                let states = states.clone();
                let a: Vec<f64> = self.data(a_log).iter().map(|&v| -v.exp()).collect();
                let (du, ddelta, mut da, db, dc, dd) = scan_backward(
                    &g,
                    self.data(u),
                    self.data(delta),
                    &a,
                    self.data(b_seq),
                    self.data(c_seq),
                    self.data(d),
                    &states,
                    bsz,
                    n,
                    di,
                    ds,
                );
                // A = -exp(a_log)  =>  dL/da_log = dL/dA · A
                for (dav, av) in da.iter_mut().zip(a.iter()) {
                    *dav *= av;
                }
                self.accumulate(u, &du);
                self.accumulate(delta, &ddelta);
                self.accumulate(a_log, &da);
                self.accumulate(b_seq, &db);
                self.accumulate(c_seq, &dc);
                self.accumulate(d, &dd);
            }
        }
    }
}

/// Forward kernel for the selective scan. Shared by the tape op and the
/// standalone benchmark path; `save_states` controls whether the per-step
/// hidden states are kept for a later backward pass.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b_seq: &[f64],
    c_seq: &[f64],
    d: &[f64],
    bsz: usize,
    n: usize,
    di: usize,
    ds: usize,
    save_states: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let mut y = vec![0.0; bsz * n * di];
    let mut states = if save_states { vec![0.0; bsz * n * di * ds] } else { Vec::new() };
    let mut x = vec![0.0; di * ds];
    for bi in 0..bsz {
        x.iter_mut().for_each(|v| *v = 0.0);
        for t in 0..n {
            let dt_off = (bi * n + t) * di;
            let bc_off = (bi * n + t) * ds;
            for i in 0..di {
                let dtv = delta[dt_off + i];
                let uv = u[dt_off + i];
                let xrow = &mut x[i * ds..(i + 1) * ds];
                let arow = &a[i * ds..(i + 1) * ds];
                let mut yv = 0.0;
                for j in 0..ds {
                    let ab = (dtv * arow[j]).exp();
                    xrow[j] = ab * xrow[j] + dtv * b_seq[bc_off + j] * uv;
                    yv += c_seq[bc_off + j] * xrow[j];
                }
                y[dt_off + i] = yv + d[i] * uv;
            }
            if save_states {
                let s_off = ((bi * n + t) * di) * ds;
                states[s_off..s_off + di * ds].copy_from_slice(&x);
            }
        }
    }
    (y, if save_states { Some(states) } else { None })
}

/// Reverse-time sweep of the scan recurrence. Returns gradients for
/// (u, delta, A, B, C, D); the caller maps dA to d(a_log).
#[allow(clippy::too_many_arguments)]
fn scan_backward(
    g: &[f64],
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b_seq: &[f64],
    c_seq: &[f64],
    d: &[f64],
    states: &[f64],
    bsz: usize,
    n: usize,
    di: usize,
    ds: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut du = vec![0.0; bsz * n * di];
    let mut ddelta = vec![0.0; bsz * n * di];
    let mut da = vec![0.0; di * ds];
    let mut db = vec![0.0; bsz * n * ds];
    let mut dc = vec![0.0; bsz * n * ds];
    let mut dd = vec![0.0; di];
    let mut carry = vec![0.0; di * ds];
    for bi in 0..bsz {
        carry.iter_mut().for_each(|v| *v = 0.0);
        for t in (0..n).rev() {
            let dt_off = (bi * n + t) * di;
            let bc_off = (bi * n + t) * ds;
            let s_off = ((bi * n + t) * di) * ds;
            for i in 0..di {
                let gy = g[dt_off + i];
                let dtv = delta[dt_off + i];
                let uv = u[dt_off + i];
                dd[i] += gy * uv;
                du[dt_off + i] += gy * d[i];
                let arow = &a[i * ds..(i + 1) * ds];
                let xt = &states[s_off + i * ds..s_off + (i + 1) * ds];
                let crow = &mut carry[i * ds..(i + 1) * ds];
                let mut ddt = 0.0;
                for j in 0..ds {
                    let cv = c_seq[bc_off + j];
                    dc[bc_off + j] += gy * xt[j];
                    // total gradient reaching x_t[i,j]
                    let dx = gy * cv + crow[j];
                    let x_prev = if t > 0 {
                        states[s_off - di * ds + i * ds + j]
                    } else {
                        0.0
                    };
                    let ab = (dtv * arow[j]).exp();
                    // x_t = ab·x_{t-1} + Δ·B·v
                    let dab = dx * x_prev;
                    ddt += dab * ab * arow[j] + dx * b_seq[bc_off + j] * uv;
                    da[i * ds + j] += dab * ab * dtv;
                    db[bc_off + j] += dx * dtv * uv;
                    du[dt_off + i] += dx * dtv * b_seq[bc_off + j];
                    crow[j] = dx * ab;
                }
                ddelta[dt_off + i] += ddt;
            }
        }
    }
    (du, ddelta, da, db, dc, dd)
}
