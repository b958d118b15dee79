//! Autoregressive generation in latent space, answer decoding, evaluation,
//! and nearest-token retrieval for inspecting latent states.

use crate::data::{TokenSample, Vocabulary};
use crate::error::{Error, Result};
use crate::model::cache::{cache_step, embed_token, latent_row, logits_row, KvCache};
use crate::model::ModelParams;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    /// Compression factor announced to the model via its control token.
    pub c: usize,
    /// Cap on latent (or discrete reasoning) steps.
    pub max_latents: usize,
    pub max_answer_tokens: usize,
    /// Softmax temperature for answer decoding.
    pub temperature: f64,
    pub top_p: f64,
    /// Scale on the latent std when sampling; 0 uses the mean directly.
    pub sigma_temp: f64,
    /// Greedy answer decoding and mean-only latents, ignoring the rng.
    pub deterministic: bool,
    /// Decode reasoning as discrete tokens instead of latent vectors.
    pub discrete_reasoning: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            c: 2,
            max_latents: 32,
            max_answer_tokens: 16,
            temperature: 1.0,
            top_p: 0.9,
            sigma_temp: 1.0,
            deterministic: false,
            discrete_reasoning: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopCause {
    Terminator,
    Cap,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub n_latents: usize,
    pub latent_stop: StopCause,
    /// Final sampled latent vectors in embedding space (already rescaled).
    pub latents: Vec<Vec<f32>>,
    pub answer_ids: Vec<u32>,
    pub answer_stop: StopCause,
    pub answer_text: String,
}

fn sample_top_p(probs: &[f64], top_p: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap());
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &idx {
        kept.push(i);
        mass += probs[i];
        if mass >= top_p {
            break;
        }
    }
    let r: f64 = rng.gen_range(0.0..mass);
    let mut acc = 0.0;
    for &i in &kept {
        acc += probs[i];
        if r < acc {
            return i;
        }
    }
    *kept.last().unwrap()
}

fn softmax_temp(logits: &[f32], temperature: f64) -> Vec<f64> {
    let t = temperature.max(1e-6);
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
    let exps: Vec<f64> = logits.iter().map(|&x| ((x as f64 - max) / t).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Generates a reasoning trace and answer for one question. The prompt is
/// `<bos> <c=k> question`; reasoning continues until the language head's
/// argmax is the terminator or the cap is hit.
pub fn generate(
    p: &ModelParams<f32>,
    vocab: &Vocabulary,
    question_ids: &[u32],
    gcfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Generation> {
    if gcfg.c < 1 || gcfg.c > crate::data::CTRL_C_MAX {
        return Err(Error::Config(format!("compression factor {} has no control token", gcfg.c)));
    }
    let mut cache = KvCache::new(p.cfg.n_layers);
    let mut h = Vec::new();
    let prompt: Vec<u32> = [vocab.bos(), vocab.ctrl(gcfg.c)]
        .into_iter()
        .chain(question_ids.iter().copied())
        .collect();
    for &id in &prompt {
        h = cache_step(p, &mut cache, &embed_token(p, id))?;
    }
    let think_end = vocab.think_end() as usize;
    let mut latents = Vec::new();
    let mut latent_stop = StopCause::Cap;
    for _ in 0..gcfg.max_latents {
        // leave room for the terminator row and at least one answer token
        if cache.len() + 2 > p.cfg.max_seq {
            break;
        }
        let lg = logits_row(p, &h);
        if argmax(&lg) == think_end {
            latent_stop = StopCause::Terminator;
            break;
        }
        if gcfg.discrete_reasoning {
            let id = if gcfg.deterministic {
                argmax(&lg)
            } else {
                sample_top_p(&softmax_temp(&lg, gcfg.temperature), gcfg.top_p, rng)
            };
            if id == think_end {
                latent_stop = StopCause::Terminator;
                break;
            }
            latents.push(embed_token(p, id as u32));
            h = cache_step(p, &mut cache, &embed_token(p, id as u32))?;
        } else {
            let (mu, sigma) = latent_row(p, &h);
            let se = p.sigma_e as f32;
            let x: Vec<f32> = (0..mu.len())
                .map(|i| {
                    let eps: f64 = if gcfg.deterministic || gcfg.sigma_temp == 0.0 {
                        0.0
                    } else {
                        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                            * gcfg.sigma_temp
                    };
                    (mu[i] as f64 + sigma[i] as f64 * eps) as f32 * se
                })
                .collect();
            latents.push(x.clone());
            h = cache_step(p, &mut cache, &x)?;
        }
    }
    let n_latents = latents.len();
    // terminator row closes the reasoning span regardless of stop cause
    h = cache_step(p, &mut cache, &embed_token(p, vocab.think_end()))?;
    let mut answer_ids = Vec::new();
    let mut answer_stop = StopCause::Cap;
    let a_end = vocab.a_end() as usize;
    for _ in 0..gcfg.max_answer_tokens {
        let lg = logits_row(p, &h);
        let id = if gcfg.deterministic {
            argmax(&lg)
        } else {
            sample_top_p(&softmax_temp(&lg, gcfg.temperature), gcfg.top_p, rng)
        };
        if id == a_end {
            answer_stop = StopCause::Terminator;
            break;
        }
        answer_ids.push(id as u32);
        if answer_ids.len() == gcfg.max_answer_tokens || cache.len() >= p.cfg.max_seq {
            break;
        }
        h = cache_step(p, &mut cache, &embed_token(p, id as u32))?;
    }
    let answer_text = vocab.detokenize(&answer_ids);
    Ok(Generation { n_latents, latent_stop, latents, answer_ids, answer_stop, answer_text })
}

/// Numeric comparison of a decoded answer against the reference value.
/// Whitespace and leading zeros are ignored; undecodable text is wrong.
pub fn answer_matches(text: &str, expect: i64) -> bool {
    text.trim().parse::<i64>().map(|v| v == expect).unwrap_or(false)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n: usize,
    pub accuracy: f64,
    pub mean_latents: f64,
    /// Fraction of reasoning spans ended by the terminator, not the cap.
    pub terminator_rate: f64,
    pub answer_terminator_rate: f64,
}

/// Evaluates accuracy and latent-length statistics over a sample set.
pub fn evaluate(
    p: &ModelParams<f32>,
    vocab: &Vocabulary,
    samples: &[TokenSample],
    gcfg: &GenConfig,
    seed: u64,
) -> Result<EvalSummary> {
    if samples.is_empty() {
        return Err(Error::Validation("empty evaluation set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    let mut latents = 0usize;
    let mut terms = 0usize;
    let mut aterms = 0usize;
    for s in samples {
        let g = generate(p, vocab, &s.question_ids, gcfg, &mut rng)?;
        if answer_matches(&g.answer_text, s.answer_value) {
            correct += 1;
        }
        latents += g.n_latents;
        terms += (g.latent_stop == StopCause::Terminator) as usize;
        aterms += (g.answer_stop == StopCause::Terminator) as usize;
    }
    let n = samples.len();
    Ok(EvalSummary {
        n,
        accuracy: correct as f64 / n as f64,
        mean_latents: latents as f64 / n as f64,
        terminator_rate: terms as f64 / n as f64,
        answer_terminator_rate: aterms as f64 / n as f64,
    })
}

/// Two-sided 95% t-interval half-widths by degrees of freedom (1..=10).
const T95: [f64; 10] = [
    12.706205, 4.302653, 3.182446, 2.776445, 2.570582, 2.446912, 2.364624, 2.306004, 2.262157,
    2.228139,
];

/// Sample mean and 95% confidence half-width (Student's t, sample std).
pub fn mean_ci95(xs: &[f64]) -> Result<(f64, f64)> {
    let n = xs.len();
    if n < 2 || n > T95.len() + 1 {
        return Err(Error::domain("mean_ci95", format!("need 2..={} values, got {}", T95.len() + 1, n)));
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    let half = T95[n - 2] * (var / n as f64).sqrt();
    Ok((mean, half))
}

/// Cosine similarity of a latent vector against every token embedding,
/// returning the top-k (token id, similarity) pairs.
pub fn latent_retrieval(
    p: &ModelParams<f32>,
    latent: &[f32],
    k: usize,
) -> Result<Vec<(u32, f64)>> {
    let v = p.cfg.vocab_size;
    let d = p.cfg.d_model;
    if latent.len() != d {
        return Err(Error::dim("latent_retrieval", format!("latent has {} dims, expected {}", latent.len(), d)));
    }
    if k == 0 || k > v {
        return Err(Error::index("latent_retrieval", format!("k={} outside [1,{}]", k, v)));
    }
    let ln: f64 = latent.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    let mut sims: Vec<(u32, f64)> = (0..v)
        .map(|r| {
            let row = &p.tok_emb.data[r * d..(r + 1) * d];
            let rn: f64 = row.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
            let dot: f64 = row.iter().zip(latent).map(|(&a, &b)| a as f64 * b as f64).sum();
            (r as u32, dot / (ln * rn).max(1e-12))
        })
        .collect();
    sims.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    sims.truncate(k);
    Ok(sims)
}
