//! Clipped-surrogate policy loss over replayed rollouts.
//!
//! Each rollout's stochastic decisions (latent samples and answer tokens)
//! are re-scored differentiably; per-element probability ratios against the
//! sampling policy feed the clipped objective, weighted by group-normalized
//! advantages and averaged per rollout by its own length (or by a fixed
//! maximum length when length normalization is off).

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::forward::{forward_hidden, latent_head, logits, push_params, TapeModel};
use crate::model::ModelParams;
use crate::rl::rollout::Rollout;
use crate::tensor::scalar::Scalar;
use crate::tensor::tape::{NodeId, Tape};
use serde::{Deserialize, Serialize};

const HALF_LN_2PI: f64 = 0.9189385332046727;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub clip_eps: f64,
    /// Must match the std scale used when the rollouts were sampled.
    pub sigma_temp: f64,
    /// Divide each rollout's objective by its own element count; when
    /// false, divide by `l_max` instead.
    pub length_normalize: bool,
    pub l_max: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig { clip_eps: 0.2, sigma_temp: 1.0, length_normalize: true, l_max: 128 }
    }
}

pub struct GrpoOut {
    pub loss: NodeId,
    pub tm: TapeModel,
    /// Fraction of elements whose ratio left the clip interval.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    /// Leaves holding the recorded sampling-policy log-probs, one entry per
    /// latent element (first) and per answer element (second). Their
    /// gradients after backward equal the per-element surrogate gradients
    /// up to sign, which makes averaging behavior directly observable.
    pub lat_old_leaf: Option<NodeId>,
    pub ans_old_leaf: Option<NodeId>,
}

/// Builds the surrogate loss for a minibatch of (rollout, advantage) pairs
/// on one tape. Old log-probs come from the rollouts; new log-probs are
/// recomputed under the current parameters.
pub fn grpo_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    vocab: &Vocabulary,
    rollouts: &[(&Rollout, f64)],
    cfg: &GrpoConfig,
) -> Result<GrpoOut> {
    if rollouts.is_empty() {
        return Err(Error::Validation("empty rollout minibatch".into()));
    }
    if cfg.sigma_temp <= 0.0 || cfg.clip_eps <= 0.0 {
        return Err(Error::Config("sigma_temp and clip_eps must be positive".into()));
    }
    let d = params.cfg.d_model;
    let tm = push_params(tape, params)?;
    let mut cats = Vec::new();
    let mut lens = Vec::new();
    // per-element bookkeeping, split by likelihood family
    let mut lat_rows = Vec::new();
    let mut lat_targets: Vec<S> = Vec::new();
    let mut lat_old = Vec::new();
    let mut lat_adv = Vec::new();
    let mut lat_w = Vec::new();
    let mut ans_rows = Vec::new();
    let mut ans_ids = Vec::new();
    let mut ans_old = Vec::new();
    let mut ans_adv = Vec::new();
    let mut ans_w = Vec::new();

    // first pass to know the padded length
    let row_count = |r: &Rollout| {
        let fed_answer = if r.answer_terminated {
            r.answer_ids.len()
        } else {
            r.answer_ids.len().saturating_sub(1)
        };
        r.prompt.len() + r.latents.len() + 1 + fed_answer
    };
    let t = rollouts.iter().map(|(r, _)| row_count(r)).max().unwrap();
    let inv_batch = 1.0 / rollouts.len() as f64;
    let se = S::from_f64(params.sigma_e);

    for (ri, (r, adv)) in rollouts.iter().enumerate() {
        let p_len = r.prompt.len();
        let l = r.latents.len();
        let n = r.answer_ids.len();
        let n_cat = n + usize::from(r.answer_terminated);
        if r.old_logprob.len() != l + n_cat {
            return Err(Error::Validation(format!(
                "rollout has {} recorded log-probs for {} decisions",
                r.old_logprob.len(),
                l + n_cat
            )));
        }
        let norm = if cfg.length_normalize { (l + n_cat).max(1) as f64 } else { cfg.l_max as f64 };
        let w = inv_batch / norm;
        let prompt_ids: Vec<usize> = r.prompt.iter().map(|&i| i as usize).collect();
        let pre = tape.gather_rows(tm.tok_emb, &prompt_ids)?;
        let mut parts = vec![pre];
        if l > 0 {
            let mut flat = Vec::with_capacity(l * d);
            for lat in &r.latents {
                flat.extend(lat.iter().map(|&v| S::from_f64(v as f64)));
            }
            let latent_leaf = tape.leaf(&[l, d], flat)?;
            // latent inputs are rescaled to embedding space
            let scaled = tape.scale(latent_leaf, se)?;
            parts.push(scaled);
        }
        let fed_answer =
            if r.answer_terminated { n } else { n.saturating_sub(1) };
        let mut tail_ids = vec![vocab.think_end() as usize];
        tail_ids.extend(r.answer_ids[..fed_answer].iter().map(|&i| i as usize));
        let tail = tape.gather_rows(tm.tok_emb, &tail_ids)?;
        parts.push(tail);
        let cat = tape.concat_rows(&parts)?;
        lens.push(tape.shape(cat)[0]);
        cats.push(cat);

        let base = ri * t;
        for j in 0..l {
            lat_rows.push(base + p_len - 1 + j);
            lat_targets.extend(r.latents[j].iter().map(|&v| S::from_f64(v as f64)));
            lat_old.push(r.old_logprob[j]);
            lat_adv.push(*adv);
            lat_w.push(w);
        }
        for k in 0..n_cat {
            // think_end row sits right after the latents
            ans_rows.push(base + p_len + l + k);
            let id = if k < n { r.answer_ids[k] as usize } else { vocab.a_end() as usize };
            ans_ids.push(id);
            ans_old.push(r.old_logprob[l + k]);
            ans_adv.push(*adv);
            ans_w.push(w);
        }
    }

    let x = tape.pack_rows(&cats, t)?;
    let h = forward_hidden(tape, &tm, params, x, rollouts.len(), t, &lens)?;

    let mut parts_loss: Vec<NodeId> = Vec::new();
    let mut clip_hits = 0usize;
    let mut ratio_sum = 0.0f64;
    let mut element_count = 0usize;
    let mut old_leaves = [None, None];
    for (rows, ids, old, adv, w, is_latent) in [
        (&lat_rows, &Vec::new(), &lat_old, &lat_adv, &lat_w, true),
        (&ans_rows, &ans_ids, &ans_old, &ans_adv, &ans_w, false),
    ] {
        if rows.is_empty() {
            continue;
        }
        let hs = tape.select_rows(h, rows)?;
        let lp_new = if is_latent {
            let (mu, sigma) = latent_head(tape, &tm, hs)?;
            let sigma_t = tape.scale(sigma, S::from_f64(cfg.sigma_temp))?;
            let target = tape.leaf(&[rows.len(), d], lat_targets.clone())?;
            let diff = tape.sub(target, mu)?;
            let d2 = tape.mul(diff, diff)?;
            let s2 = tape.mul(sigma_t, sigma_t)?;
            let inv = tape.recip(s2)?;
            let q = tape.mul(d2, inv)?;
            let q = tape.scale(q, S::from_f64(0.5))?;
            let lnst = tape.ln(sigma_t)?;
            let term = tape.add(q, lnst)?;
            let ones = tape.leaf(&[d, 1], vec![S::ONE; d])?;
            let rowsum = tape.matmul(term, ones)?;
            let neg = tape.scale(rowsum, S::from_f64(-1.0))?;
            tape.add_const(neg, S::from_f64(-(d as f64) * HALF_LN_2PI))?
        } else {
            let lg = logits(tape, &tm, hs)?;
            tape.log_softmax_gather(lg, ids)?
        };
        let old_leaf = tape.leaf(tape.shape(lp_new).to_vec().as_slice(), old.iter().map(|&v| S::from_f64(-v)).collect())?;
        old_leaves[usize::from(!is_latent)] = Some(old_leaf);
        let diff = tape.add(lp_new, old_leaf)?;
        let ratio = tape.exp(diff)?;
        for &v in tape.value(ratio) {
            let v = v.to_f64();
            ratio_sum += v;
            element_count += 1;
            if (v - 1.0).abs() > cfg.clip_eps {
                clip_hits += 1;
            }
        }
        let clipped =
            tape.clamp(ratio, S::from_f64(1.0 - cfg.clip_eps), S::from_f64(1.0 + cfg.clip_eps))?;
        let adv_leaf = tape.leaf(tape.shape(ratio).to_vec().as_slice(), adv.iter().map(|&v| S::from_f64(v)).collect())?;
        let ra = tape.mul(ratio, adv_leaf)?;
        let rca = tape.mul(clipped, adv_leaf)?;
        let m = tape.minimum(ra, rca)?;
        let weights: Vec<S> = w.iter().map(|&v| S::from_f64(-v)).collect();
        parts_loss.push(tape.dot_const(m, &weights)?);
    }
    let loss = match parts_loss.len() {
        1 => parts_loss[0],
        2 => tape.add(parts_loss[0], parts_loss[1])?,
        _ => return Err(Error::Validation("rollouts contain no stochastic decisions".into())),
    };
    Ok(GrpoOut {
        loss,
        tm,
        clip_fraction: clip_hits as f64 / element_count.max(1) as f64,
        mean_ratio: ratio_sum / element_count.max(1) as f64,
        lat_old_leaf: old_leaves[0],
        ans_old_leaf: old_leaves[1],
    })
}
