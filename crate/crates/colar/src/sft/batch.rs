//! Packed-batch construction for supervised training.
//!
//! Each sample becomes one padded row-block:
//!   [<bos>, <c=k>, question..., latent*, <think_end>, answer...]
//! where the latent rows are the compressed reasoning embeddings. Token
//! labels supervise the language head (group-sampled tokens over the latent
//! span, exact tokens over the answer); latent positions additionally
//! supervise the Gaussian latent head with the next compressed embedding.

use crate::data::{TokenSample, Vocabulary};
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Label value for unsupervised positions.
pub const IGNORE: i64 = -100;

#[derive(Debug, Clone)]
pub struct SampleLayout {
    /// `<bos>`, `<c=k>`, question ids (ending in `<q_end>`).
    pub prefix: Vec<usize>,
    /// Reasoning-chain ids without the terminator; compressed into latents.
    pub reason: Vec<usize>,
    /// `<think_end>` then answer ids (ending in `<a_end>`).
    pub suffix: Vec<usize>,
    /// Number of latent rows: ceil(reason / c).
    pub n_latent: usize,
}

impl SampleLayout {
    pub fn rows(&self) -> usize {
        self.prefix.len() + self.n_latent + self.suffix.len()
    }
}

#[derive(Debug, Clone)]
pub struct SftBatch {
    pub c: usize,
    pub samples: Vec<SampleLayout>,
    /// Padded per-sample length.
    pub t: usize,
    pub lens: Vec<usize>,
    /// Next-token labels over the packed [batch * t] grid.
    pub labels: Vec<i64>,
    /// Absolute packed rows whose output predicts a latent.
    pub latent_pos: Vec<usize>,
    /// (sample, group) target for each entry of `latent_pos`.
    pub latent_target: Vec<(usize, usize)>,
    /// Samples dropped because they exceeded the model's context.
    pub skipped: usize,
}

/// Builds a batch at one compression factor. Samples longer than `max_seq`
/// are dropped and counted; an entirely dropped batch is an error.
pub fn build_batch(
    samples: &[&TokenSample],
    vocab: &Vocabulary,
    c: usize,
    max_seq: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SftBatch> {
    if c < 1 {
        return Err(Error::domain("build_batch", "compression factor must be >= 1"));
    }
    let mut layouts = Vec::new();
    let mut skipped = 0;
    for s in samples {
        let mut prefix = vec![vocab.bos() as usize, vocab.ctrl(c.min(crate::data::CTRL_C_MAX)) as usize];
        prefix.extend(s.question_ids.iter().map(|&i| i as usize));
        let n = s.reasoning_ids.len();
        let reason: Vec<usize> = s.reasoning_ids[..n - 1].iter().map(|&i| i as usize).collect();
        if reason.is_empty() {
            return Err(Error::Validation("sample has an empty reasoning chain".into()));
        }
        let suffix: Vec<usize> = std::iter::once(s.reasoning_ids[n - 1] as usize)
            .chain(s.answer_ids.iter().map(|&i| i as usize))
            .collect();
        let n_latent = reason.len().div_ceil(c);
        let layout = SampleLayout { prefix, reason, suffix, n_latent };
        if layout.rows() > max_seq {
            skipped += 1;
            continue;
        }
        layouts.push(layout);
    }
    if layouts.is_empty() {
        return Err(Error::Generation(format!(
            "all {} samples exceed the {}-position context",
            samples.len(),
            max_seq
        )));
    }
    let t = layouts.iter().map(|l| l.rows()).max().unwrap();
    let b = layouts.len();
    let mut labels = vec![IGNORE; b * t];
    let mut latent_pos = Vec::new();
    let mut latent_target = Vec::new();
    let mut lens = Vec::with_capacity(b);
    for (si, l) in layouts.iter().enumerate() {
        let base = si * t;
        let p = l.prefix.len();
        let lc = l.n_latent;
        // one token label per latent step, drawn uniformly from its group
        let group_label = |g: usize, rng: &mut ChaCha8Rng| {
            let start = g * c;
            let end = (start + c).min(l.reason.len());
            l.reason[rng.gen_range(start..end)] as i64
        };
        labels[base + p - 1] = group_label(0, rng);
        latent_pos.push(base + p - 1);
        latent_target.push((si, 0));
        for j in 0..lc {
            let pos = base + p + j;
            if j + 1 < lc {
                labels[pos] = group_label(j + 1, rng);
                latent_pos.push(pos);
                latent_target.push((si, j + 1));
            } else {
                labels[pos] = l.suffix[0] as i64; // terminator
            }
        }
        for (i, &id) in l.suffix.iter().enumerate().skip(1) {
            labels[base + p + lc + i - 1] = id as i64;
        }
        lens.push(l.rows());
    }
    Ok(SftBatch { c, samples: layouts, t, lens, labels, latent_pos, latent_target, skipped })
}
