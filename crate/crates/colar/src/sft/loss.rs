//! Supervised losses: cross-entropy over the packed label stream plus a
//! latent regression loss on the Gaussian head.

use crate::error::Result;
use crate::model::forward::{forward_hidden, latent_head, logits, push_params, TapeModel};
use crate::model::ModelParams;
use crate::sft::batch::SftBatch;
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum LatentLossKind {
    /// Gaussian negative log-likelihood (up to the constant term).
    Nll,
    /// Sampled mean-squared error minus `alpha` times the Gaussian entropy.
    SoftMse { alpha: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftLossConfig {
    pub latent_weight: f64,
    pub latent_loss: LatentLossKind,
}

impl Default for SftLossConfig {
    fn default() -> Self {
        SftLossConfig { latent_weight: 1.0, latent_loss: LatentLossKind::Nll }
    }
}

/// Mean over elements of (target - mu)^2 / (2 sigma^2) + ln sigma.
pub fn latent_nll<S: Scalar>(
    tape: &mut Tape<S>,
    mu: NodeId,
    sigma: NodeId,
    target: NodeId,
) -> Result<NodeId> {
    let n = tape.value(mu).len();
    let diff = tape.sub(target, mu)?;
    let d2 = tape.mul(diff, diff)?;
    let s2 = tape.mul(sigma, sigma)?;
    let inv = tape.recip(s2)?;
    let q = tape.mul(d2, inv)?;
    let q = tape.scale(q, S::from_f64(0.5))?;
    let lnsig = tape.ln(sigma)?;
    let term = tape.add(q, lnsig)?;
    let total = tape.sum(term)?;
    tape.scale(total, S::from_f64(1.0 / n as f64))
}

/// Mean squared error of a reparameterized sample against the target, minus
/// `alpha` times the mean Gaussian entropy (1/2) ln(2 pi e sigma^2).
pub fn latent_soft_mse<S: Scalar>(
    tape: &mut Tape<S>,
    mu: NodeId,
    sigma: NodeId,
    target: NodeId,
    noise: &[S],
    alpha: f64,
) -> Result<NodeId> {
    let n = tape.value(mu).len();
    let samp = tape.gaussian_sample(mu, sigma, noise)?;
    let diff = tape.sub(samp, target)?;
    let d2 = tape.mul(diff, diff)?;
    let mse = tape.sum(d2)?;
    let mse = tape.scale(mse, S::from_f64(1.0 / n as f64))?;
    let lnsig = tape.ln(sigma)?;
    let ent = tape.sum(lnsig)?;
    let ent = tape.scale(ent, S::from_f64(1.0 / n as f64))?;
    let half_ln_2pie = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    let ent = tape.add_const(ent, S::from_f64(half_ln_2pie))?;
    let ent = tape.scale(ent, S::from_f64(-alpha))?;
    tape.add(mse, ent)
}

pub struct SftLossOut {
    pub total: NodeId,
    pub tm: TapeModel,
    pub ce_value: f64,
    pub latent_value: f64,
}

/// Full differentiable forward pass for one packed batch: embeds, compresses
/// reasoning spans, runs the trunk, and combines token and latent losses.
pub fn sft_forward_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    batch: &SftBatch,
    cfg: &SftLossConfig,
    rng: &mut ChaCha8Rng,
) -> Result<SftLossOut> {
    let d = params.cfg.d_model;
    let tm = push_params(tape, params)?;
    let mut cats = Vec::with_capacity(batch.samples.len());
    let mut latents = Vec::with_capacity(batch.samples.len());
    for l in &batch.samples {
        let pre = tape.gather_rows(tm.tok_emb, &l.prefix)?;
        let r = tape.gather_rows(tm.tok_emb, &l.reason)?;
        let e = tape.compress_groups(r, batch.c)?;
        let suf = tape.gather_rows(tm.tok_emb, &l.suffix)?;
        let cat = tape.concat_rows(&[pre, e, suf])?;
        cats.push(cat);
        latents.push(e);
    }
    let x = tape.pack_rows(&cats, batch.t)?;
    let h = forward_hidden(tape, &tm, params, x, batch.samples.len(), batch.t, &batch.lens)?;
    let lg = logits(tape, &tm, h)?;
    let ce = tape.softmax_cross_entropy(lg, &batch.labels, crate::sft::batch::IGNORE)?;
    let ce_value = tape.value(ce)[0].to_f64();

    if cfg.latent_weight == 0.0 || batch.latent_pos.is_empty() {
        return Ok(SftLossOut { total: ce, tm, ce_value, latent_value: 0.0 });
    }
    let hs = tape.select_rows(h, &batch.latent_pos)?;
    let (mu, sigma) = latent_head(tape, &tm, hs)?;
    // targets are the compressed embeddings scaled by 1/sigma_e, detached
    let inv_se = S::from_f64(1.0 / params.sigma_e);
    let mut tgt = Vec::with_capacity(batch.latent_target.len() * d);
    for &(s, g) in &batch.latent_target {
        let e = tape.value(latents[s]);
        tgt.extend(e[g * d..(g + 1) * d].iter().map(|&v| v * inv_se));
    }
    let target = tape.leaf(&[batch.latent_target.len(), d], tgt)?;
    let lat = match cfg.latent_loss {
        LatentLossKind::Nll => latent_nll(tape, mu, sigma, target)?,
        LatentLossKind::SoftMse { alpha } => {
            let noise: Vec<S> = (0..batch.latent_target.len() * d)
                .map(|_| S::from_f64(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)))
                .collect();
            latent_soft_mse(tape, mu, sigma, target, &noise, alpha)?
        }
    };
    let latent_value = tape.value(lat)[0].to_f64();
    let weighted = tape.scale(lat, S::from_f64(cfg.latent_weight))?;
    let total = tape.add(ce, weighted)?;
    Ok(SftLossOut { total, tm, ce_value, latent_value })
}
