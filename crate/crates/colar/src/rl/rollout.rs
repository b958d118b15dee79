//! Group rollouts for reinforcement learning: sampled latent traces and
//! answers with enough recorded state (noise, log-probs) to replay the
//! policy likelihood exactly.

use crate::data::{TokenSample, Vocabulary};
use crate::error::{Error, Result};
use crate::infer::answer_matches;
use crate::model::cache::{cache_step, embed_token, latent_row, logits_row, KvCache};
use crate::model::ModelParams;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const HALF_LN_2PI: f64 = 0.9189385332046727;

#[derive(Debug, Clone)]
pub struct Rollout {
    /// Prompt token ids: `<bos> <c=k> question`.
    pub prompt: Vec<u32>,
    /// Sampled latent vectors in the normalized (unit-scale) space.
    pub latents: Vec<Vec<f32>>,
    /// Answer tokens emitted before the terminator (terminator excluded).
    pub answer_ids: Vec<u32>,
    /// Whether the answer ended with the terminator (its choice is an
    /// element of the likelihood when it did).
    pub answer_terminated: bool,
    /// Per-element log-probs under the sampling policy: one per latent
    /// step, one per answer token, one for the terminator if emitted.
    pub old_logprob: Vec<f64>,
    pub reward: f64,
}

impl Rollout {
    /// Number of stochastic decisions in this trajectory.
    pub fn len(&self) -> usize {
        self.old_logprob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.old_logprob.is_empty()
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RolloutConfig {
    pub c: usize,
    pub max_latents: usize,
    pub max_answer_tokens: usize,
    /// Scale applied to the predicted latent std while sampling.
    pub sigma_temp: f64,
}

/// Samples one trajectory for a question and scores it with the binary
/// numeric reward.
pub fn sample_rollout(
    p: &ModelParams<f32>,
    vocab: &Vocabulary,
    sample: &TokenSample,
    cfg: &RolloutConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Rollout> {
    if cfg.sigma_temp <= 0.0 {
        return Err(Error::Config("sigma_temp must be positive for sampling".into()));
    }
    let d = p.cfg.d_model;
    let mut cache = KvCache::new(p.cfg.n_layers);
    let prompt: Vec<u32> = [vocab.bos(), vocab.ctrl(cfg.c)]
        .into_iter()
        .chain(sample.question_ids.iter().copied())
        .collect();
    let mut h = Vec::new();
    for &id in &prompt {
        h = cache_step(p, &mut cache, &embed_token(p, id))?;
    }
    let think_end = vocab.think_end() as usize;
    let se = p.sigma_e as f32;
    let mut latents = Vec::new();
    let mut old_logprob = Vec::new();
    for _ in 0..cfg.max_latents {
        if cache.len() + 2 > p.cfg.max_seq {
            break;
        }
        let lg = logits_row(p, &h);
        let amax = (0..lg.len()).max_by(|&a, &b| lg[a].partial_cmp(&lg[b]).unwrap()).unwrap();
        if amax == think_end {
            break;
        }
        let (mu, sigma) = latent_row(p, &h);
        let mut x = vec![0.0f32; d];
        let mut lp = 0.0f64;
        for i in 0..d {
            let eps: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng);
            let st = sigma[i] as f64 * cfg.sigma_temp;
            x[i] = (mu[i] as f64 + st * eps) as f32;
            lp += -0.5 * eps * eps - st.ln() - HALF_LN_2PI;
        }
        old_logprob.push(lp);
        let row: Vec<f32> = x.iter().map(|&v| v * se).collect();
        latents.push(x);
        h = cache_step(p, &mut cache, &row)?;
    }
    h = cache_step(p, &mut cache, &embed_token(p, vocab.think_end()))?;
    let a_end = vocab.a_end() as usize;
    let mut answer_ids = Vec::new();
    let mut answer_terminated = false;
    for _ in 0..cfg.max_answer_tokens {
        let lg = logits_row(p, &h);
        let max = lg.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
        let exps: Vec<f64> = lg.iter().map(|&x| (x as f64 - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let r: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut id = lg.len() - 1;
        for (i, &e) in exps.iter().enumerate() {
            acc += e / z;
            if r < acc {
                id = i;
                break;
            }
        }
        old_logprob.push((exps[id] / z).max(1e-300).ln());
        if id == a_end {
            answer_terminated = true;
            break;
        }
        answer_ids.push(id as u32);
        if cache.len() >= p.cfg.max_seq {
            break;
        }
        h = cache_step(p, &mut cache, &embed_token(p, id as u32))?;
    }
    let text = vocab.detokenize(&answer_ids);
    let reward = if answer_matches(&text, sample.answer_value) { 1.0 } else { 0.0 };
    Ok(Rollout { prompt, latents, answer_ids, answer_terminated, old_logprob, reward })
}

/// Group-normalized advantages: (r - mean) / population std. Returns None
/// when every reward in the group is identical (the group carries no
/// learning signal and is skipped).
pub fn group_advantages(rewards: &[f64]) -> Option<Vec<f64>> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return None;
    }
    let std = var.sqrt();
    Some(rewards.iter().map(|r| (r - mean) / std).collect())
}
