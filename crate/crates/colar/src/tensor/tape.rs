//! Wengert-tape reverse-mode automatic differentiation.
//!
//! Operations execute eagerly and record themselves onto the tape in
//! topological order. `backward` replays the record in reverse, visiting
//! each node exactly once. Every forward output is checked for finiteness;
//! a NaN/Inf aborts with the offending op node named in the error.

use crate::error::{Error, Result};
use crate::tensor::scalar::Scalar;

/// Handle into the tape's node list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

pub(crate) const RMS_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    /// out[m x n] = a[m x k] @ b, with b stored [n x k] when `trans_b`.
    Matmul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// out[n x d] = a[n x d] + bias[d] per row.
    AddRow { a: NodeId, bias: NodeId, d: usize },
    Scale { a: NodeId, k: S },
    AddConst { a: NodeId },
    Gelu { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Recip { a: NodeId },
    Clamp { a: NodeId, lo: S, hi: S },
    Minimum { a: NodeId, b: NodeId },
    RmsNorm { x: NodeId, gain: NodeId, d: usize },
    /// Mean NLL over non-ignored rows; saved = softmax probs.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<i64>,
        ignore: i64,
        v: usize,
        count: usize,
    },
    /// Per-row log-softmax probability of the chosen id; saved = probs.
    LogSoftmaxGather { logits: NodeId, ids: Vec<usize>, v: usize },
    GatherRows { table: NodeId, ids: Vec<usize>, d: usize },
    SelectRows { a: NodeId, idx: Vec<usize>, d: usize },
    /// Groups of `c` consecutive rows summed and scaled by 1/sqrt(group len).
    CompressGroups { a: NodeId, c: usize, d: usize },
    /// Parts concatenated row-wise, each zero-padded to `t` rows.
    PackRows { parts: Vec<NodeId>, t: usize, d: usize },
    /// Parts concatenated row-wise with no padding.
    ConcatRows { parts: Vec<NodeId>, d: usize },
    Sum { a: NodeId },
    /// Scalar dot product with a constant weight vector.
    DotConst { a: NodeId, w: Vec<S> },
    GaussianSample { mu: NodeId, sigma: NodeId, noise: Vec<S> },
    /// Fused causal multi-head self-attention; saved = attention probs.
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        t: usize,
        heads: usize,
        lens: Vec<usize>,
    },
}

impl<S: Scalar> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::AddConst { .. } => "add_const",
            Op::Gelu { .. } => "gelu",
            Op::Exp { .. } => "exp",
            Op::Ln { .. } => "ln",
            Op::Recip { .. } => "recip",
            Op::Clamp { .. } => "clamp",
            Op::Minimum { .. } => "minimum",
            Op::RmsNorm { .. } => "rms_norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::LogSoftmaxGather { .. } => "log_softmax_gather",
            Op::GatherRows { .. } => "gather_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::CompressGroups { .. } => "compress_groups",
            Op::PackRows { .. } => "pack_rows",
            Op::ConcatRows { .. } => "concat_rows",
            Op::Sum { .. } => "sum",
            Op::DotConst { .. } => "dot_const",
            Op::GaussianSample { .. } => "gaussian_sample",
            Op::Attention { .. } => "attention",
        }
    }
}

struct Node<S: Scalar> {
    op: Op<S>,
    shape: Vec<usize>,
    value: Vec<S>,
    /// Op-specific intermediates kept for the backward pass.
    saved: Vec<S>,
}

/// The computation record: an ordered op list plus per-node values/gradients.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Vec<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Gradient of the last `backward` with respect to node `id`.
    /// Zero-filled if the node was never reached.
    pub fn grad(&self, id: NodeId) -> Vec<S> {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => vec![S::ZERO; self.nodes[id.0].value.len()],
        }
    }

    fn push(&mut self, op: Op<S>, shape: Vec<usize>, value: Vec<S>, saved: Vec<S>) -> Result<NodeId> {
        debug_assert_eq!(numel(&shape), value.len());
        let idx = self.nodes.len();
        if let Some(bad) = value.iter().find(|x| !x.is_finite_val()) {
            let _ = bad;
            return Err(Error::NonFinite { node: idx, op: op.name() });
        }
        self.nodes.push(Node { op, shape, value, saved });
        self.grads.push(None);
        Ok(NodeId(idx))
    }

    pub fn leaf(&mut self, shape: &[usize], value: Vec<S>) -> Result<NodeId> {
        if numel(shape) != value.len() {
            return Err(Error::dim(
                "leaf",
                format!("shape {:?} does not match value count {}", shape, value.len()),
            ));
        }
        self.push(Op::Leaf, shape.to_vec(), value, Vec::new())
    }

    pub fn scalar(&mut self, value: S) -> Result<NodeId> {
        self.leaf(&[1], vec![value])
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false)
    }

    /// out = a @ b^T with b stored row-major [n x k].
    pub fn matmul_trans_b(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim("matmul", format!("expected 2-d operands, got {:?} and {:?}", sa, sb)));
        }
        let (m, k) = (sa[0], sa[1]);
        let (n, kb) = if trans_b { (sb[0], sb[1]) } else { (sb[1], sb[0]) };
        if kb != k {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions disagree: {:?} x {:?}", sa, sb),
            ));
        }
        let mut out = vec![S::ZERO; m * n];
        S::gemm(m, k, n, S::ONE, self.value(a), false, self.value(b), trans_b, S::ZERO, &mut out);
        self.push(Op::Matmul { a, b, m, k, n, trans_b }, vec![m, n], out, Vec::new())
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn broadcast_pair(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(usize, bool, bool)> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la == lb {
            Ok((la, false, false))
        } else if lb == 1 {
            Ok((la, false, true))
        } else if la == 1 {
            Ok((lb, true, false))
        } else {
            Err(Error::dim(
                op,
                format!("shapes {:?} and {:?} are not broadcast-compatible", self.shape(a), self.shape(b)),
            ))
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (len, ba, bb) = self.broadcast_pair("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<S> = (0..len)
            .map(|i| va[if ba { 0 } else { i }] + vb[if bb { 0 } else { i }])
            .collect();
        let shape = if ba { self.shape(b).to_vec() } else { self.shape(a).to_vec() };
        self.push(Op::Add { a, b }, shape, out, Vec::new())
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (len, ba, bb) = self.broadcast_pair("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<S> = (0..len)
            .map(|i| va[if ba { 0 } else { i }] * vb[if bb { 0 } else { i }])
            .collect();
        let shape = if ba { self.shape(b).to_vec() } else { self.shape(a).to_vec() };
        self.push(Op::Mul { a, b }, shape, out, Vec::new())
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, S::from_f64(-1.0))?;
        self.add(a, nb)
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let d = *sa.last().ok_or_else(|| Error::dim("add_row", "0-d input"))?;
        if self.value(bias).len() != d {
            return Err(Error::dim(
                "add_row",
                format!("bias length {} vs last dim {}", self.value(bias).len(), d),
            ));
        }
        let (va, vb) = (self.value(a), self.value(bias));
        let out: Vec<S> = va.iter().enumerate().map(|(i, &x)| x + vb[i % d]).collect();
        self.push(Op::AddRow { a, bias, d }, sa, out, Vec::new())
    }

    pub fn scale(&mut self, a: NodeId, k: S) -> Result<NodeId> {
        let out: Vec<S> = self.value(a).iter().map(|&x| x * k).collect();
        self.push(Op::Scale { a, k }, self.nodes[a.0].shape.clone(), out, Vec::new())
    }

    pub fn add_const(&mut self, a: NodeId, k: S) -> Result<NodeId> {
        let out: Vec<S> = self.value(a).iter().map(|&x| x + k).collect();
        self.push(Op::AddConst { a }, self.nodes[a.0].shape.clone(), out, Vec::new())
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<S> = self.value(a).iter().map(|&x| gelu_fwd(x)).collect();
        self.push(Op::Gelu { a }, self.nodes[a.0].shape.clone(), out, Vec::new())
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<S> = self.value(a).iter().map(|&x| x.exp()).collect();
        self.push(Op::Exp { a }, self.nodes[a.0].shape.clone(), out, Vec::new())
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        if self.value(a).iter().any(|&x| x <= S::ZERO) {
            return Err(Error::domain("ln", "non-positive input"));
        }
        let out: Vec<S> = self.value(a).iter().map(|&x| x.ln()).collect();
        self.push(Op::Ln { a }, self.nodes[a.0].shape.clone(), out, Vec::new())
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<S> = self.value(a).iter().map(|&x| S::ONE / x).collect();
        self.push(Op::Recip { a }, self.nodes[a.0].shape.clone(), out, Vec::new())
    }

    pub fn clamp(&mut self, a: NodeId, lo: S, hi: S) -> Result<NodeId> {
        let out: Vec<S> = self.value(a).iter().map(|&x| x.maxv(lo).minv(hi)).collect();
        self.push(Op::Clamp { a, lo, hi }, self.nodes[a.0].shape.clone(), out, Vec::new())
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (len, ba, bb) = self.broadcast_pair("minimum", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<S> = (0..len)
            .map(|i| va[if ba { 0 } else { i }].minv(vb[if bb { 0 } else { i }]))
            .collect();
        let shape = if ba { self.shape(b).to_vec() } else { self.shape(a).to_vec() };
        self.push(Op::Minimum { a, b }, shape, out, Vec::new())
    }

    // ── normalization ───────────────────────────────────────────────

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| Error::dim("rms_norm", "0-d input"))?;
        if self.value(gain).len() != d {
            return Err(Error::dim(
                "rms_norm",
                format!("gain length {} vs last dim {}", self.value(gain).len(), d),
            ));
        }
        let (vx, vg) = (self.value(x), self.value(gain));
        let rows = vx.len() / d;
        let mut out = vec![S::ZERO; vx.len()];
        let mut inv_rms = vec![S::ZERO; rows];
        for r in 0..rows {
            let row = &vx[r * d..(r + 1) * d];
            let ms: f64 = row.iter().map(|x| x.to_f64() * x.to_f64()).sum::<f64>() / d as f64;
            let inv = S::from_f64(1.0 / (ms + RMS_EPS).sqrt());
            inv_rms[r] = inv;
            for i in 0..d {
                out[r * d + i] = row[i] * inv * vg[i];
            }
        }
        self.push(Op::RmsNorm { x, gain, d }, sx, out, inv_rms)
    }

    // ── losses and lookups ──────────────────────────────────────────

    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[i64],
        ignore: i64,
    ) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("logits {:?} vs {} labels", sl, labels.len()),
            ));
        }
        let (n, v) = (sl[0], sl[1]);
        for &l in labels {
            if l != ignore && (l < 0 || l as usize >= v) {
                return Err(Error::index("softmax_cross_entropy", format!("label {} outside [0,{})", l, v)));
            }
        }
        let count = labels.iter().filter(|&&l| l != ignore).count();
        if count == 0 {
            return Err(Error::domain("softmax_cross_entropy", "all positions ignored; mean undefined"));
        }
        let vl = self.value(logits);
        let mut probs = vec![S::ZERO; n * v];
        let mut loss = 0.0f64;
        for r in 0..n {
            let row = &vl[r * v..(r + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64()));
            let mut z = 0.0f64;
            for i in 0..v {
                let e = (row[i].to_f64() - max).exp();
                probs[r * v + i] = S::from_f64(e);
                z += e;
            }
            let inv = S::from_f64(1.0 / z);
            for i in 0..v {
                probs[r * v + i] *= inv;
            }
            if labels[r] != ignore {
                let p = probs[r * v + labels[r] as usize].to_f64();
                loss -= p.max(1e-300).ln();
            }
        }
        loss /= count as f64;
        self.push(
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), ignore, v, count },
            vec![1],
            vec![S::from_f64(loss)],
            probs,
        )
    }

    pub fn log_softmax_gather(&mut self, logits: NodeId, ids: &[usize]) -> Result<NodeId> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != ids.len() {
            return Err(Error::dim(
                "log_softmax_gather",
                format!("logits {:?} vs {} ids", sl, ids.len()),
            ));
        }
        let (n, v) = (sl[0], sl[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::index("log_softmax_gather", format!("id {} outside [0,{})", bad, v)));
        }
        let vl = self.value(logits);
        let mut probs = vec![S::ZERO; n * v];
        let mut out = vec![S::ZERO; n];
        for r in 0..n {
            let row = &vl[r * v..(r + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.to_f64()));
            let mut z = 0.0f64;
            for i in 0..v {
                let e = (row[i].to_f64() - max).exp();
                probs[r * v + i] = S::from_f64(e);
                z += e;
            }
            let inv = S::from_f64(1.0 / z);
            for i in 0..v {
                probs[r * v + i] *= inv;
            }
            out[r] = S::from_f64(row[ids[r]].to_f64() - max - z.ln());
        }
        self.push(Op::LogSoftmaxGather { logits, ids: ids.to_vec(), v }, vec![n], out, probs)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(Error::dim("gather_rows", format!("table must be 2-d, got {:?}", st)));
        }
        let (vrows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vrows) {
            return Err(Error::index("gather_rows", format!("id {} outside [0,{})", bad, vrows)));
        }
        let vt = self.value(table);
        let mut out = vec![S::ZERO; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&vt[id * d..(id + 1) * d]);
        }
        self.push(Op::GatherRows { table, ids: ids.to_vec(), d }, vec![ids.len(), d], out, Vec::new())
    }

    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(Error::dim("select_rows", format!("input must be 2-d, got {:?}", sa)));
        }
        let (rows, d) = (sa[0], sa[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::index("select_rows", format!("row {} outside [0,{})", bad, rows)));
        }
        let va = self.value(a);
        let mut out = vec![S::ZERO; idx.len() * d];
        for (r, &i) in idx.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(&va[i * d..(i + 1) * d]);
        }
        self.push(Op::SelectRows { a, idx: idx.to_vec(), d }, vec![idx.len(), d], out, Vec::new())
    }

    /// The Embedding Compress operator: consecutive groups of `c` rows are
    /// summed and scaled by 1/sqrt(group size); a final partial group uses
    /// its actual size in the scale.
    pub fn compress_groups(&mut self, a: NodeId, c: usize) -> Result<NodeId> {
        if c < 1 {
            return Err(Error::domain("compress_groups", "compression factor must be >= 1"));
        }
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] == 0 {
            return Err(Error::dim("compress_groups", format!("need non-empty 2-d input, got {:?}", sa)));
        }
        let (rows, d) = (sa[0], sa[1]);
        let groups = rows.div_ceil(c);
        let va = self.value(a);
        let mut out = vec![S::ZERO; groups * d];
        for g in 0..groups {
            let start = g * c;
            let end = (start + c).min(rows);
            let scale = S::from_f64(1.0 / ((end - start) as f64).sqrt());
            for r in start..end {
                for i in 0..d {
                    out[g * d + i] += va[r * d + i] * scale;
                }
            }
        }
        self.push(Op::CompressGroups { a, c, d }, vec![groups, d], out, Vec::new())
    }

    /// Packs per-sample row blocks into a rectangular [parts.len()*t, d]
    /// layout, zero-padding each block to `t` rows.
    pub fn pack_rows(&mut self, parts: &[NodeId], t: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dim("pack_rows", "no parts"));
        }
        let d = self.shape(parts[0])[1];
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[1] != d {
                return Err(Error::dim("pack_rows", format!("part shape {:?} incompatible with d={}", sp, d)));
            }
            if sp[0] > t {
                return Err(Error::dim("pack_rows", format!("part has {} rows > t={}", sp[0], t)));
            }
        }
        let b = parts.len();
        let mut out = vec![S::ZERO; b * t * d];
        for (s, &p) in parts.iter().enumerate() {
            let vp = self.value(p);
            out[s * t * d..s * t * d + vp.len()].copy_from_slice(vp);
        }
        self.push(Op::PackRows { parts: parts.to_vec(), t, d }, vec![b * t, d], out, Vec::new())
    }

    /// Row-wise concatenation of 2-d parts sharing a last dimension.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::dim("concat_rows", "no parts"));
        }
        let d = self.shape(parts[0])[1];
        let mut rows = 0;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[1] != d {
                return Err(Error::dim(
                    "concat_rows",
                    format!("part shape {:?} incompatible with d={}", sp, d),
                ));
            }
            rows += sp[0];
        }
        let mut out = Vec::with_capacity(rows * d);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        self.push(Op::ConcatRows { parts: parts.to_vec(), d }, vec![rows, d], out, Vec::new())
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).iter().map(|x| x.to_f64()).sum();
        self.push(Op::Sum { a }, vec![1], vec![S::from_f64(total)], Vec::new())
    }

    /// Scalar-valued weighted sum with constant weights.
    pub fn dot_const(&mut self, a: NodeId, w: &[S]) -> Result<NodeId> {
        if self.value(a).len() != w.len() {
            return Err(Error::dim(
                "dot_const",
                format!("{} elements vs {} weights", self.value(a).len(), w.len()),
            ));
        }
        let total: f64 = self.value(a).iter().zip(w).map(|(x, y)| x.to_f64() * y.to_f64()).sum();
        self.push(Op::DotConst { a, w: w.to_vec() }, vec![1], vec![S::from_f64(total)], Vec::new())
    }

    /// Reparameterized Gaussian sample: mu + sigma * noise, with externally
    /// drawn (and recorded) standard-normal noise so replay is deterministic.
    pub fn gaussian_sample(&mut self, mu: NodeId, sigma: NodeId, noise: &[S]) -> Result<NodeId> {
        let (vm, vs) = (self.value(mu), self.value(sigma));
        if vm.len() != vs.len() || vm.len() != noise.len() {
            return Err(Error::dim(
                "gaussian_sample",
                format!("mu {} / sigma {} / noise {} lengths disagree", vm.len(), vs.len(), noise.len()),
            ));
        }
        if vs.iter().any(|&s| s <= S::ZERO) {
            return Err(Error::domain("gaussian_sample", "sigma must be strictly positive"));
        }
        let out: Vec<S> = (0..vm.len()).map(|i| vm[i] + vs[i] * noise[i]).collect();
        self.push(
            Op::GaussianSample { mu, sigma, noise: noise.to_vec() },
            self.nodes[mu.0].shape.clone(),
            out,
            Vec::new(),
        )
    }

    /// Causal multi-head self-attention over a packed [batch*t, d] layout.
    /// Rows at positions >= lens[b] are padding and produce zero output.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        batch: usize,
        t: usize,
        heads: usize,
        lens: &[usize],
    ) -> Result<NodeId> {
        let d = self.shape(q)[1];
        for &x in [q, k, v].iter() {
            let s = self.shape(x);
            if s.len() != 2 || s[0] != batch * t || s[1] != d {
                return Err(Error::dim("attention", format!("operand shape {:?}, expected [{}, {}]", s, batch * t, d)));
            }
        }
        if d % heads != 0 {
            return Err(Error::dim("attention", format!("d={} not divisible by heads={}", d, heads)));
        }
        if lens.len() != batch || lens.iter().any(|&l| l > t) {
            return Err(Error::dim("attention", "bad lens"));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![S::ZERO; batch * t * d];
        let mut probs = vec![S::ZERO; batch * heads * t * t];
        for b in 0..batch {
            let n = lens[b];
            for h in 0..heads {
                let pbase = (b * heads + h) * t * t;
                for i in 0..n {
                    let qrow = &vq[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    // scores over j <= i
                    let mut max = f64::NEG_INFINITY;
                    let mut scores = vec![0.0f64; i + 1];
                    for j in 0..=i {
                        let krow = &vk[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
                        let s = s * scale;
                        scores[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut z = 0.0f64;
                    for j in 0..=i {
                        scores[j] = (scores[j] - max).exp();
                        z += scores[j];
                    }
                    let orow = &mut out[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                    for j in 0..=i {
                        let p = scores[j] / z;
                        probs[pbase + i * t + j] = S::from_f64(p);
                        let vrow = &vv[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                        let ps = S::from_f64(p);
                        for x in 0..dh {
                            orow[x] += ps * vrow[x];
                        }
                    }
                }
            }
        }
        self.push(
            Op::Attention { q, k, v, batch, t, heads, lens: lens.to_vec() },
            vec![batch * t, d],
            out,
            probs,
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// reachable node. A second call on the same record is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward", "record already consumed; re-run forward first"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        self.consumed = true;
        self.grads[loss.0] = Some(vec![S::ONE]);
        for idx in (0..=loss.0).rev() {
            let g = match self.grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, id: NodeId, f: impl FnOnce(&mut [S])) {
        let len = self.nodes[id.0].value.len();
        let buf = self.grads[id.0].get_or_insert_with(|| vec![S::ZERO; len]);
        f(buf);
    }

    fn backward_node(&mut self, idx: usize, g: &[S]) -> Result<()> {
        // Inputs of node `idx` always precede it on the tape, so borrows of
        // values (by clone-free indexing) and gradient buffers never alias.
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            &Op::Matmul { a, b, m, k, n, trans_b } => {
                // dA += g @ B^T (or g @ B when B was transposed)
                let vb_ptr = b;
                let va_ptr = a;
                let gb = g.to_vec();
                {
                    let vb = self.nodes[vb_ptr.0].value.clone();
                    self.acc(a, |da| {
                        if !trans_b {
                            // B stored [k x n]; dA = g[m x n] @ B^T
                            S::gemm(m, n, k, S::ONE, &gb, false, &vb, true, S::ONE, da);
                        } else {
                            // B stored [n x k]; dA = g[m x n] @ B
                            S::gemm(m, n, k, S::ONE, &gb, false, &vb, false, S::ONE, da);
                        }
                    });
                }
                {
                    let va = self.nodes[va_ptr.0].value.clone();
                    self.acc(b, |db| {
                        if !trans_b {
                            // dB[k x n] = A^T @ g
                            S::gemm(k, m, n, S::ONE, &va, true, &gb, false, S::ONE, db);
                        } else {
                            // B stored [n x k]: dB = g^T @ A
                            S::gemm(n, m, k, S::ONE, &gb, true, &va, false, S::ONE, db);
                        }
                    });
                }
            }
            &Op::Add { a, b } => {
                let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
                self.acc(a, |da| {
                    if la == g.len() {
                        for (d, &x) in da.iter_mut().zip(g) {
                            *d += x;
                        }
                    } else {
                        da[0] += g.iter().fold(S::ZERO, |s, &x| s + x);
                    }
                });
                self.acc(b, |db| {
                    if lb == g.len() {
                        for (d, &x) in db.iter_mut().zip(g) {
                            *d += x;
                        }
                    } else {
                        db[0] += g.iter().fold(S::ZERO, |s, &x| s + x);
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                self.acc(a, |da| {
                    if la == g.len() {
                        for i in 0..g.len() {
                            da[i] += g[i] * vb[if lb == 1 { 0 } else { i }];
                        }
                    } else {
                        da[0] += g.iter().zip(&vb).fold(S::ZERO, |s, (&x, &y)| s + x * y);
                    }
                });
                self.acc(b, |db| {
                    if lb == g.len() {
                        for i in 0..g.len() {
                            db[i] += g[i] * va[if la == 1 { 0 } else { i }];
                        }
                    } else {
                        db[0] += g.iter().zip(&va).fold(S::ZERO, |s, (&x, &y)| s + x * y);
                    }
                });
            }
            &Op::AddRow { a, bias, d } => {
                self.acc(a, |da| {
                    for (dst, &x) in da.iter_mut().zip(g) {
                        *dst += x;
                    }
                });
                self.acc(bias, |db| {
                    for (i, &x) in g.iter().enumerate() {
                        db[i % d] += x;
                    }
                });
            }
            &Op::Scale { a, k } => {
                self.acc(a, |da| {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x * k;
                    }
                });
            }
            &Op::AddConst { a } => {
                self.acc(a, |da| {
                    for (d, &x) in da.iter_mut().zip(g) {
                        *d += x;
                    }
                });
            }
            &Op::Gelu { a } => {
                let va = self.nodes[a.0].value.clone();
                self.acc(a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_bwd(va[i]);
                    }
                });
            }
            &Op::Exp { a } => {
                let out = self.nodes[idx].value.clone();
                self.acc(a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * out[i];
                    }
                });
            }
            &Op::Ln { a } => {
                let va = self.nodes[a.0].value.clone();
                self.acc(a, |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] / va[i];
                    }
                });
            }
            &Op::Recip { a } => {
                let va = self.nodes[a.0].value.clone();
                self.acc(a, |da| {
                    for i in 0..g.len() {
                        da[i] -= g[i] / (va[i] * va[i]);
                    }
                });
            }
            &Op::Clamp { a, lo, hi } => {
                let va = self.nodes[a.0].value.clone();
                self.acc(a, |da| {
                    for i in 0..g.len() {
                        if va[i] >= lo && va[i] <= hi {
                            da[i] += g[i];
                        }
                    }
                });
            }
            &Op::Minimum { a, b } => {
                let (la, lb) = (self.nodes[a.0].value.len(), self.nodes[b.0].value.len());
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                // ties route to `a`
                self.acc(a, |da| {
                    for i in 0..g.len() {
                        let x = va[if la == 1 { 0 } else { i }];
                        let y = vb[if lb == 1 { 0 } else { i }];
                        if x <= y {
                            da[if la == 1 { 0 } else { i }] += g[i];
                        }
                    }
                });
                self.acc(b, |db| {
                    for i in 0..g.len() {
                        let x = va[if la == 1 { 0 } else { i }];
                        let y = vb[if lb == 1 { 0 } else { i }];
                        if x > y {
                            db[if lb == 1 { 0 } else { i }] += g[i];
                        }
                    }
                });
            }
            &Op::RmsNorm { x, gain, d } => {
                let vx = self.nodes[x.0].value.clone();
                let vg = self.nodes[gain.0].value.clone();
                let inv = self.nodes[idx].saved.clone();
                let rows = vx.len() / d;
                self.acc(x, |dx| {
                    for r in 0..rows {
                        let ir = inv[r];
                        let mut dot = S::ZERO;
                        for i in 0..d {
                            dot += g[r * d + i] * vg[i] * vx[r * d + i];
                        }
                        let coeff = dot * ir * ir * ir / S::from_f64(d as f64);
                        for i in 0..d {
                            dx[r * d + i] += g[r * d + i] * vg[i] * ir - vx[r * d + i] * coeff;
                        }
                    }
                });
                self.acc(gain, |dg| {
                    for r in 0..rows {
                        let ir = inv[r];
                        for i in 0..d {
                            dg[i] += g[r * d + i] * vx[r * d + i] * ir;
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, ignore, v, count } => {
                let (logits, labels, ignore, v, count) =
                    (*logits, labels.clone(), *ignore, *v, *count);
                let probs = self.nodes[idx].saved.clone();
                let gs = g[0] / S::from_f64(count as f64);
                self.acc(logits, |dl| {
                    for (r, &lab) in labels.iter().enumerate() {
                        if lab == ignore {
                            continue;
                        }
                        for i in 0..v {
                            let mut p = probs[r * v + i];
                            if i as i64 == lab {
                                p -= S::ONE;
                            }
                            dl[r * v + i] += gs * p;
                        }
                    }
                });
            }
            Op::LogSoftmaxGather { logits, ids, v } => {
                let (logits, ids, v) = (*logits, ids.clone(), *v);
                let probs = self.nodes[idx].saved.clone();
                self.acc(logits, |dl| {
                    for (r, &id) in ids.iter().enumerate() {
                        let gr = g[r];
                        for i in 0..v {
                            let mut x = -probs[r * v + i];
                            if i == id {
                                x += S::ONE;
                            }
                            dl[r * v + i] += gr * x;
                        }
                    }
                });
            }
            Op::GatherRows { table, ids, d } => {
                let (table, ids, d) = (*table, ids.clone(), *d);
                self.acc(table, |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for i in 0..d {
                            dt[id * d + i] += g[r * d + i];
                        }
                    }
                });
            }
            Op::SelectRows { a, idx: sel, d } => {
                let (a, sel, d) = (*a, sel.clone(), *d);
                self.acc(a, |da| {
                    for (r, &i) in sel.iter().enumerate() {
                        for x in 0..d {
                            da[i * d + x] += g[r * d + x];
                        }
                    }
                });
            }
            &Op::CompressGroups { a, c, d } => {
                let rows = self.nodes[a.0].value.len() / d;
                let groups = rows.div_ceil(c);
                self.acc(a, |da| {
                    for gi in 0..groups {
                        let start = gi * c;
                        let end = (start + c).min(rows);
                        let scale = S::from_f64(1.0 / ((end - start) as f64).sqrt());
                        for r in start..end {
                            for i in 0..d {
                                da[r * d + i] += g[gi * d + i] * scale;
                            }
                        }
                    }
                });
            }
            Op::PackRows { parts, t, d } => {
                let (parts, t, d) = (parts.clone(), *t, *d);
                for (s, &p) in parts.iter().enumerate() {
                    let plen = self.nodes[p.0].value.len();
                    self.acc(p, |dp| {
                        let base = s * t * d;
                        for i in 0..plen {
                            dp[i] += g[base + i];
                        }
                    });
                }
            }
            Op::ConcatRows { parts, d } => {
                let (parts, _d) = (parts.clone(), *d);
                let mut base = 0;
                for &p in &parts {
                    let plen = self.nodes[p.0].value.len();
                    self.acc(p, |dp| {
                        for i in 0..plen {
                            dp[i] += g[base + i];
                        }
                    });
                    base += plen;
                }
            }
            &Op::Sum { a } => {
                self.acc(a, |da| {
                    for x in da.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::DotConst { a, w } => {
                let (a, w) = (*a, w.clone());
                self.acc(a, |da| {
                    for i in 0..w.len() {
                        da[i] += g[0] * w[i];
                    }
                });
            }
            Op::GaussianSample { mu, sigma, noise } => {
                let (mu, sigma, noise) = (*mu, *sigma, noise.clone());
                self.acc(mu, |dm| {
                    for (d, &x) in dm.iter_mut().zip(g) {
                        *d += x;
                    }
                });
                self.acc(sigma, |ds| {
                    for i in 0..g.len() {
                        ds[i] += g[i] * noise[i];
                    }
                });
            }
            Op::Attention { q, k, v, batch, t, heads, lens } => {
                let (q, k, v) = (*q, *k, *v);
                let (batch, t, heads) = (*batch, *t, *heads);
                let lens = lens.clone();
                let d = self.nodes[q.0].shape[1];
                let dh = d / heads;
                let scale = S::from_f64(1.0 / (dh as f64).sqrt());
                let probs = self.nodes[idx].saved.clone();
                let vq = self.nodes[q.0].value.clone();
                let vk = self.nodes[k.0].value.clone();
                let vv = self.nodes[v.0].value.clone();
                let mut dq = vec![S::ZERO; vq.len()];
                let mut dk = vec![S::ZERO; vk.len()];
                let mut dv = vec![S::ZERO; vv.len()];
                for b in 0..batch {
                    let n = lens[b];
                    for h in 0..heads {
                        let pbase = (b * heads + h) * t * t;
                        for i in 0..n {
                            let go = &g[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                            // dP[j] = go . V_j ; dV_j += P[j] * go
                            let mut dp = vec![S::ZERO; i + 1];
                            for j in 0..=i {
                                let p = probs[pbase + i * t + j];
                                let vrow = &vv[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                                let mut acc = S::ZERO;
                                for x in 0..dh {
                                    acc += go[x] * vrow[x];
                                    dv[(b * t + j) * d + h * dh + x] += p * go[x];
                                }
                                dp[j] = acc;
                            }
                            // softmax backward: dS = P * (dP - sum(dP * P))
                            let mut dot = S::ZERO;
                            for j in 0..=i {
                                dot += dp[j] * probs[pbase + i * t + j];
                            }
                            for j in 0..=i {
                                let ds = probs[pbase + i * t + j] * (dp[j] - dot) * scale;
                                let krow = &vk[(b * t + j) * d + h * dh..(b * t + j) * d + (h + 1) * dh];
                                let qrow = &vq[(b * t + i) * d + h * dh..(b * t + i) * d + (h + 1) * dh];
                                for x in 0..dh {
                                    dq[(b * t + i) * d + h * dh + x] += ds * krow[x];
                                    dk[(b * t + j) * d + h * dh + x] += ds * qrow[x];
                                }
                            }
                        }
                    }
                }
                self.acc(q, |da| {
                    for (dst, &x) in da.iter_mut().zip(&dq) {
                        *dst += x;
                    }
                });
                self.acc(k, |da| {
                    for (dst, &x) in da.iter_mut().zip(&dk) {
                        *dst += x;
                    }
                });
                self.acc(v, |da| {
                    for (dst, &x) in da.iter_mut().zip(&dv) {
                        *dst += x;
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn gelu_fwd<S: Scalar>(x: S) -> S {
    // tanh approximation
    let x64 = x.to_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x64 + 0.044715 * x64 * x64 * x64);
    S::from_f64(0.5 * x64 * (1.0 + inner.tanh()))
}

fn gelu_bwd<S: Scalar>(x: S) -> S {
    let x64 = x.to_f64();
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let inner = c * (x64 + 0.044715 * x64 * x64 * x64);
    let th = inner.tanh();
    let sech2 = 1.0 - th * th;
    let dinner = c * (1.0 + 3.0 * 0.044715 * x64 * x64);
    S::from_f64(0.5 * (1.0 + th) + 0.5 * x64 * sech2 * dinner)
}
