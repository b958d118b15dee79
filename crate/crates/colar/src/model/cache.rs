//! Incremental forward pass with per-layer key/value caches.
//!
//! Runs without a tape, one position at a time, for generation. Implemented
//! independently of the training forward so the two can cross-check each
//! other: cached incremental hidden states must match a full recomputation.

use crate::error::{Error, Result};
use crate::model::{ModelParams, SIGMA_MAX, SIGMA_MIN};
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::{gelu_fwd, RMS_EPS};

struct LayerCache<S: Scalar> {
    k: Vec<S>,
    v: Vec<S>,
}

/// Per-layer key/value history for one sequence.
pub struct KvCache<S: Scalar> {
    layers: Vec<LayerCache<S>>,
    len: usize,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(n_layers: usize) -> Self {
        KvCache {
            layers: (0..n_layers).map(|_| LayerCache { k: Vec::new(), v: Vec::new() }).collect(),
            len: 0,
        }
    }

    /// Number of positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Drops all cached positions after `n`, rewinding the sequence.
    pub fn truncate(&mut self, n: usize, d: usize) {
        for l in &mut self.layers {
            l.k.truncate(n * d);
            l.v.truncate(n * d);
        }
        self.len = self.len.min(n);
    }
}

fn rms_norm_row<S: Scalar>(x: &[S], gain: &[S], out: &mut [S]) {
    let d = x.len();
    let ms: f64 = x.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>() / d as f64;
    let inv = S::from_f64(1.0 / (ms + RMS_EPS).sqrt());
    for i in 0..d {
        out[i] = x[i] * inv * gain[i];
    }
}

fn matvec<S: Scalar>(x: &[S], w: &[S], k: usize, n: usize, out: &mut [S]) {
    out.iter_mut().for_each(|v| *v = S::ZERO);
    S::gemm(1, k, n, S::ONE, x, false, w, false, S::ZERO, out);
}

/// Advances the cache by one position. `x` is the input embedding row
/// (without positional term); returns the final-norm hidden state.
pub fn cache_step<S: Scalar>(
    p: &ModelParams<S>,
    cache: &mut KvCache<S>,
    x: &[S],
) -> Result<Vec<S>> {
    let d = p.cfg.d_model;
    if x.len() != d {
        return Err(Error::dim("cache_step", format!("input row has {} values, expected {}", x.len(), d)));
    }
    if cache.len >= p.cfg.max_seq {
        return Err(Error::contract(
            "cache_step",
            format!("sequence length {} reached the model maximum", p.cfg.max_seq),
        ));
    }
    let pos = cache.len;
    let mut h: Vec<S> = (0..d).map(|i| x[i] + p.pos_emb.data[pos * d + i]).collect();
    for li in 0..p.cfg.n_layers {
        block_step(p, cache, li, pos, &mut h)?;
    }
    cache.len += 1;
    let mut out = vec![S::ZERO; d];
    rms_norm_row(&h, &p.final_norm.data, &mut out);
    Ok(out)
}

fn norm<S: Scalar>(x: &[S]) -> f64 {
    x.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt()
}

/// Embedding row for a token id.
pub fn embed_token<S: Scalar>(p: &ModelParams<S>, id: u32) -> Vec<S> {
    let d = p.cfg.d_model;
    p.tok_emb.data[id as usize * d..(id as usize + 1) * d].to_vec()
}

/// Language-head logits for one hidden row.
pub fn logits_row<S: Scalar>(p: &ModelParams<S>, h: &[S]) -> Vec<S> {
    let d = p.cfg.d_model;
    let v = p.cfg.vocab_size;
    let mut out = vec![S::ZERO; v];
    S::gemm(1, d, v, S::ONE, h, false, &p.tok_emb.data, true, S::ZERO, &mut out);
    out
}

/// Latent-head mean and clamped std for one hidden row.
pub fn latent_row<S: Scalar>(p: &ModelParams<S>, h: &[S]) -> (Vec<S>, Vec<S>) {
    let d = p.cfg.d_model;
    let hw = p.cfg.latent_hidden;
    let lt = &p.latent;
    let mut z1 = vec![S::ZERO; hw];
    S::gemm(1, d, hw, S::ONE, h, false, &lt.w1.data, false, S::ZERO, &mut z1);
    for (i, v) in z1.iter_mut().enumerate() {
        *v = gelu_fwd(*v + lt.b1.data[i]);
    }
    let mut z2 = vec![S::ZERO; hw];
    S::gemm(1, hw, hw, S::ONE, &z1, false, &lt.w2.data, false, S::ZERO, &mut z2);
    for (i, v) in z2.iter_mut().enumerate() {
        *v = gelu_fwd(*v + lt.b2.data[i]);
    }
    let mut mu = vec![S::ZERO; d];
    S::gemm(1, hw, d, S::ONE, &z2, false, &lt.w_mu.data, false, S::ZERO, &mut mu);
    for (i, v) in mu.iter_mut().enumerate() {
        *v = *v + lt.b_mu.data[i];
    }
    let mut sigma = vec![S::ZERO; d];
    S::gemm(1, hw, d, S::ONE, &z2, false, &lt.w_sigma.data, false, S::ZERO, &mut sigma);
    let (lo, hi) = (S::from_f64(SIGMA_MIN), S::from_f64(SIGMA_MAX));
    for (i, v) in sigma.iter_mut().enumerate() {
        *v = (*v + lt.b_sigma.data[i]).exp().maxv(lo).minv(hi);
    }
    (mu, sigma)
}

/// Per-layer relative hidden-state change, averaged over positions:
/// for each block, mean over t of |h_out - h_in| / |h_in|.
pub fn layer_growth<S: Scalar>(p: &ModelParams<S>, rows: &[Vec<S>]) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(Error::dim("layer_growth", "no input rows"));
    }
    let d = p.cfg.d_model;
    let mut totals = vec![0.0f64; p.cfg.n_layers];
    let mut cache = KvCache::new(p.cfg.n_layers);
    // replicate the incremental pass but snapshot h around each block
    for x in rows {
        let pos = cache.len();
        let mut h: Vec<S> = (0..d).map(|i| x[i] + p.pos_emb.data[pos * d + i]).collect();
        for li in 0..p.cfg.n_layers {
            let before = h.clone();
            block_step(p, &mut cache, li, pos, &mut h)?;
            let num: f64 = (0..d)
                .map(|i| {
                    let dv = h[i].to_f64() - before[i].to_f64();
                    dv * dv
                })
                .sum::<f64>()
                .sqrt();
            let den = norm(&before).max(1e-12);
            totals[li] += num / den;
        }
        cache.len += 1;
    }
    Ok(totals.iter().map(|t| t / rows.len() as f64).collect())
}

fn block_step<S: Scalar>(
    p: &ModelParams<S>,
    cache: &mut KvCache<S>,
    li: usize,
    pos: usize,
    h: &mut Vec<S>,
) -> Result<()> {
    let d = p.cfg.d_model;
    let heads = p.cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let layer = &p.layers[li];
    let mut n = vec![S::ZERO; d];
    rms_norm_row(h, &layer.norm1.data, &mut n);
    let mut q = vec![S::ZERO; d];
    matvec(&n, &layer.wq.data, d, d, &mut q);
    let lc = &mut cache.layers[li];
    let base = lc.k.len();
    lc.k.resize(base + d, S::ZERO);
    lc.v.resize(base + d, S::ZERO);
    {
        let (kd, vd) = (&mut lc.k[base..], &mut lc.v[base..]);
        S::gemm(1, d, d, S::ONE, &n, false, &layer.wk.data, false, S::ZERO, kd);
        S::gemm(1, d, d, S::ONE, &n, false, &layer.wv.data, false, S::ZERO, vd);
    }
    let t = pos + 1;
    let mut att = vec![S::ZERO; d];
    for hd in 0..heads {
        let qh = &q[hd * dh..(hd + 1) * dh];
        let mut scores = vec![0.0f64; t];
        let mut max = f64::NEG_INFINITY;
        for j in 0..t {
            let kh = &lc.k[j * d + hd * dh..j * d + (hd + 1) * dh];
            let s: f64 =
                qh.iter().zip(kh).map(|(a, b)| a.to_f64() * b.to_f64()).sum::<f64>() * scale;
            scores[j] = s;
            max = max.max(s);
        }
        let mut z = 0.0f64;
        for s in scores.iter_mut() {
            *s = (*s - max).exp();
            z += *s;
        }
        let oh = &mut att[hd * dh..(hd + 1) * dh];
        for j in 0..t {
            let w = S::from_f64(scores[j] / z);
            let vh = &lc.v[j * d + hd * dh..j * d + (hd + 1) * dh];
            for i in 0..dh {
                oh[i] += w * vh[i];
            }
        }
    }
    let mut o = vec![S::ZERO; d];
    matvec(&att, &layer.wo.data, d, d, &mut o);
    for i in 0..d {
        h[i] += o[i];
    }
    rms_norm_row(h, &layer.norm2.data, &mut n);
    let mut f = vec![S::ZERO; p.cfg.d_ff];
    matvec(&n, &layer.w1.data, d, p.cfg.d_ff, &mut f);
    for (i, v) in f.iter_mut().enumerate() {
        *v = gelu_fwd(*v + layer.b1.data[i]);
    }
    matvec(&f, &layer.w2.data, p.cfg.d_ff, d, &mut o);
    for i in 0..d {
        h[i] += o[i] + layer.b2.data[i];
    }
    Ok(())
}
