//! Differentiable forward pass: parameters are pushed onto a tape as leaves,
//! activations are built per batch, and gradients are pulled back into the
//! host-side tensors after `backward`.

use crate::error::Result;
use crate::model::{ModelParams, SIGMA_MAX, SIGMA_MIN};
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};

pub struct TapeLayer {
    pub wq: NodeId,
    pub wk: NodeId,
    pub wv: NodeId,
    pub wo: NodeId,
    pub norm1: NodeId,
    pub norm2: NodeId,
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

pub struct TapeLatent {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
    pub w_mu: NodeId,
    pub b_mu: NodeId,
    pub w_sigma: NodeId,
    pub b_sigma: NodeId,
}

/// Leaf node handles for every parameter, in the same order as
/// `ModelParams::named`.
pub struct TapeModel {
    pub tok_emb: NodeId,
    pub pos_emb: NodeId,
    pub layers: Vec<TapeLayer>,
    pub final_norm: NodeId,
    pub latent: TapeLatent,
}

impl TapeModel {
    pub fn node_list(&self) -> Vec<NodeId> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([l.wq, l.wk, l.wv, l.wo, l.norm1, l.norm2, l.w1, l.b1, l.w2, l.b2]);
        }
        out.push(self.final_norm);
        let lt = &self.latent;
        out.extend([lt.w1, lt.b1, lt.w2, lt.b2, lt.w_mu, lt.b_mu, lt.w_sigma, lt.b_sigma]);
        out
    }
}

/// Pushes every parameter tensor onto the tape as a leaf.
pub fn push_params<S: Scalar>(tape: &mut Tape<S>, p: &ModelParams<S>) -> Result<TapeModel> {
    let mut leaf = |t: &crate::tensor::Tensor<S>| tape.leaf(&t.shape, t.data.clone());
    let tok_emb = leaf(&p.tok_emb)?;
    let pos_emb = leaf(&p.pos_emb)?;
    let mut layers = Vec::with_capacity(p.layers.len());
    for l in &p.layers {
        let mut leaf = |t: &crate::tensor::Tensor<S>| tape.leaf(&t.shape, t.data.clone());
        layers.push(TapeLayer {
            wq: leaf(&l.wq)?,
            wk: leaf(&l.wk)?,
            wv: leaf(&l.wv)?,
            wo: leaf(&l.wo)?,
            norm1: leaf(&l.norm1)?,
            norm2: leaf(&l.norm2)?,
            w1: leaf(&l.w1)?,
            b1: leaf(&l.b1)?,
            w2: leaf(&l.w2)?,
            b2: leaf(&l.b2)?,
        });
    }
    let mut leaf = |t: &crate::tensor::Tensor<S>| tape.leaf(&t.shape, t.data.clone());
    let final_norm = leaf(&p.final_norm)?;
    let lt = &p.latent;
    let latent = TapeLatent {
        w1: leaf(&lt.w1)?,
        b1: leaf(&lt.b1)?,
        w2: leaf(&lt.w2)?,
        b2: leaf(&lt.b2)?,
        w_mu: leaf(&lt.w_mu)?,
        b_mu: leaf(&lt.b_mu)?,
        w_sigma: leaf(&lt.w_sigma)?,
        b_sigma: leaf(&lt.b_sigma)?,
    };
    Ok(TapeModel { tok_emb, pos_emb, layers, final_norm, latent })
}

/// Accumulates tape gradients back into the parameter tensors after
/// `backward`. Order matches `push_params`.
pub fn pull_grads<S: Scalar>(tape: &Tape<S>, tm: &TapeModel, p: &mut ModelParams<S>) {
    let nodes = tm.node_list();
    for (node, tensor) in nodes.into_iter().zip(p.params_mut()) {
        tensor.accumulate_grad(&tape.grad(node));
    }
}

/// Transformer trunk over already-embedded inputs packed as [batch*t, d].
/// Adds learned positional embeddings, runs pre-norm attention/FFN blocks,
/// and applies the final norm. Rows at positions >= lens[b] are padding.
pub fn forward_hidden<S: Scalar>(
    tape: &mut Tape<S>,
    tm: &TapeModel,
    p: &ModelParams<S>,
    x: NodeId,
    batch: usize,
    t: usize,
    lens: &[usize],
) -> Result<NodeId> {
    let mut pos = Vec::with_capacity(batch * t);
    for _ in 0..batch {
        pos.extend(0..t);
    }
    let pe = tape.gather_rows(tm.pos_emb, &pos)?;
    let mut h = tape.add(x, pe)?;
    for l in &tm.layers {
        let n = tape.rms_norm(h, l.norm1)?;
        let q = tape.matmul(n, l.wq)?;
        let k = tape.matmul(n, l.wk)?;
        let v = tape.matmul(n, l.wv)?;
        let a = tape.attention(q, k, v, batch, t, p.cfg.n_heads, lens)?;
        let o = tape.matmul(a, l.wo)?;
        h = tape.add(h, o)?;
        let n2 = tape.rms_norm(h, l.norm2)?;
        let f = tape.matmul(n2, l.w1)?;
        let f = tape.add_row(f, l.b1)?;
        let f = tape.gelu(f)?;
        let f = tape.matmul(f, l.w2)?;
        let f = tape.add_row(f, l.b2)?;
        h = tape.add(h, f)?;
    }
    tape.rms_norm(h, tm.final_norm)
}

/// Language head: hidden states against the transposed embedding table.
pub fn logits<S: Scalar>(tape: &mut Tape<S>, tm: &TapeModel, h: NodeId) -> Result<NodeId> {
    tape.matmul_trans_b(h, tm.tok_emb)
}

/// Latent head: per-row mean and clamped standard deviation of the next
/// compressed embedding.
pub fn latent_head<S: Scalar>(
    tape: &mut Tape<S>,
    tm: &TapeModel,
    h: NodeId,
) -> Result<(NodeId, NodeId)> {
    let lt = &tm.latent;
    let z = tape.matmul(h, lt.w1)?;
    let z = tape.add_row(z, lt.b1)?;
    let z = tape.gelu(z)?;
    let z = tape.matmul(z, lt.w2)?;
    let z = tape.add_row(z, lt.b2)?;
    let z = tape.gelu(z)?;
    let mu = tape.matmul(z, lt.w_mu)?;
    let mu = tape.add_row(mu, lt.b_mu)?;
    let raw = tape.matmul(z, lt.w_sigma)?;
    let raw = tape.add_row(raw, lt.b_sigma)?;
    let sigma = tape.exp(raw)?;
    let sigma = tape.clamp(sigma, S::from_f64(SIGMA_MIN), S::from_f64(SIGMA_MAX))?;
    Ok((mu, sigma))
}
