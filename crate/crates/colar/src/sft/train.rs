//! Supervised training loop: packed batches, AdamW updates, periodic
//! validation, CSV logging, and checkpoint retention.

use crate::data::{io::config_hash, Dataset, Vocabulary};
use crate::error::{Error, Result};
use crate::infer::{evaluate, EvalSummary, GenConfig};
use crate::model::checkpoint::save_checkpoint;
use crate::model::forward::pull_grads;
use crate::model::ModelParams;
use crate::sft::batch::build_batch;
use crate::sft::loss::{sft_forward_loss, SftLossConfig};
use crate::tensor::optim::{AdamWConfig, OptimizerState};
use crate::tensor::tape::Tape;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum CompressionChoice {
    Fixed(usize),
    /// Uniform over 1..=max, redrawn per batch.
    Uniform(usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub loss: SftLossConfig,
    pub c_choice: CompressionChoice,
    /// Compression factor used for validation decoding.
    pub val_c: usize,
    pub val_every: usize,
    pub val_samples: usize,
    /// Validation decodes reasoning as discrete tokens (token-level model).
    pub val_discrete: bool,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Resume point: training runs steps `start_step+1..=steps` and appends
    /// to an existing log instead of truncating it.
    #[serde(default)]
    pub start_step: usize,
    /// Wall-clock budget; the loop stops after the first step that exceeds
    /// it, saving a final checkpoint.
    #[serde(default)]
    pub max_minutes: Option<f64>,
    /// Stop after this many validations without a new best.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Cosine-decay the learning rate to this fraction of its initial value
    /// by the final step; 1.0 keeps it constant.
    #[serde(default = "default_final_lr_frac")]
    pub final_lr_frac: f64,
}

fn default_final_lr_frac() -> f64 {
    1.0
}

impl Default for SftTrainConfig {
    fn default() -> Self {
        SftTrainConfig {
            steps: 2000,
            batch_size: 32,
            optim: AdamWConfig::default(),
            loss: SftLossConfig::default(),
            c_choice: CompressionChoice::Uniform(4),
            val_c: 2,
            val_every: 250,
            val_samples: 200,
            val_discrete: false,
            seed: 0,
            log_path: None,
            checkpoint_dir: None,
            start_step: 0,
            max_minutes: None,
            patience: None,
            final_lr_frac: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftStepLog {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    pub latent: f64,
    pub val: Option<EvalSummary>,
}

#[derive(Debug, Clone)]
pub struct SftReport {
    pub history: Vec<SftStepLog>,
    pub best_val: Option<EvalSummary>,
    pub best_step: usize,
    pub skipped_samples: usize,
}

/// Ranks validation results: higher accuracy, then fewer latents, then the
/// earlier step.
pub(crate) fn better(a: &EvalSummary, sa: usize, b: &EvalSummary, sb: usize) -> bool {
    if a.accuracy != b.accuracy {
        return a.accuracy > b.accuracy;
    }
    if a.mean_latents != b.mean_latents {
        return a.mean_latents < b.mean_latents;
    }
    sa < sb
}

pub fn train_sft(
    params: &mut ModelParams<f32>,
    ds: &Dataset,
    vocab: &Vocabulary,
    cfg: &SftTrainConfig,
) -> Result<SftReport> {
    if ds.train.is_empty() {
        return Err(Error::Validation("empty training split".into()));
    }
    let (CompressionChoice::Fixed(c) | CompressionChoice::Uniform(c)) = cfg.c_choice;
    if c < 1 || c > crate::data::CTRL_C_MAX {
        return Err(Error::Config(format!("compression factor {} out of range", c)));
    }
    if cfg.start_step >= cfg.steps {
        return Err(Error::Config(format!(
            "resume point {} is at or past the step budget {}",
            cfg.start_step, cfg.steps
        )));
    }
    let hash = config_hash(cfg);
    let mut log = match &cfg.log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            if cfg.start_step > 0 && p.exists() {
                Some(BufWriter::new(File::options().append(true).open(p)?))
            } else {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "# config_hash={}", hash)?;
                writeln!(w, "step,loss,ce,latent,val_accuracy,val_mean_latents,val_term_rate")?;
                Some(w)
            }
        }
        None => None,
    };
    let t0 = std::time::Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.train.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;
    let mut opt = {
        let refs: Vec<&crate::tensor::Tensor<f32>> =
            params.named().into_iter().map(|(_, t)| t).collect();
        OptimizerState::new(cfg.optim.clone(), &refs)
    };
    let mut history = Vec::new();
    let mut best_val: Option<EvalSummary> = None;
    let mut best_step = 0usize;
    let mut skipped_total = 0usize;
    let mut saved_steps: Vec<PathBuf> = Vec::new();
    let mut stale = 0usize;
    let vhash = vocab.hash();

    for step in cfg.start_step + 1..=cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let samples: Vec<&crate::data::TokenSample> = idx.iter().map(|&i| &ds.train[i]).collect();
        let c = match cfg.c_choice {
            CompressionChoice::Fixed(c) => c,
            CompressionChoice::Uniform(max) => rng.gen_range(1..=max),
        };
        let batch = build_batch(&samples, vocab, c, params.cfg.max_seq, &mut rng)?;
        skipped_total += batch.skipped;
        let mut tape: Tape<f32> = Tape::new();
        let out = sft_forward_loss(&mut tape, params, &batch, &cfg.loss, &mut rng)
            .map_err(|e| Error::Generation(format!("step {} (c={}) failed: {}", step, c, e)))?;
        let loss_v = tape.value(out.total)[0] as f64;
        tape.backward(out.total)
            .map_err(|e| Error::Generation(format!("step {} backward failed: {}", step, e)))?;
        pull_grads(&tape, &out.tm, params);
        drop(tape);
        {
            if cfg.final_lr_frac < 1.0 {
                let lo = cfg.optim.lr * cfg.final_lr_frac;
                let phase = std::f64::consts::PI * step as f64 / cfg.steps as f64;
                opt.cfg.lr = lo + (cfg.optim.lr - lo) * 0.5 * (1.0 + phase.cos());
            }
            let mut refs = params.params_mut();
            opt.step(&mut refs)?;
        }

        let val = if cfg.val_every > 0 && (step % cfg.val_every == 0 || step == cfg.steps) {
            let n = cfg.val_samples.min(ds.val.len());
            if n > 0 {
                let gcfg = GenConfig {
                    c: cfg.val_c,
                    deterministic: true,
                    discrete_reasoning: cfg.val_discrete,
                    max_latents: 64,
                    ..Default::default()
                };
                let summary = evaluate(params, vocab, &ds.val[..n], &gcfg, cfg.seed)?;
                if best_val.as_ref().map_or(true, |b| better(&summary, step, b, best_step)) {
                    best_val = Some(summary.clone());
                    best_step = step;
                    stale = 0;
                    if let Some(dir) = &cfg.checkpoint_dir {
                        save_checkpoint(&dir.join("best.bin"), params, &vhash, step as u64)?;
                    }
                } else {
                    stale += 1;
                }
                if let Some(dir) = &cfg.checkpoint_dir {
                    let path = dir.join(format!("step_{}.bin", step));
                    save_checkpoint(&path, params, &vhash, step as u64)?;
                    saved_steps.push(path);
                    while saved_steps.len() > 3 {
                        let old = saved_steps.remove(0);
                        let _ = std::fs::remove_file(old);
                    }
                }
                Some(summary)
            } else {
                None
            }
        } else {
            None
        };

        if let Some(w) = log.as_mut() {
            match &val {
                Some(v) => writeln!(
                    w,
                    "{},{:.6},{:.6},{:.6},{:.4},{:.3},{:.3}",
                    step, loss_v, out.ce_value, out.latent_value, v.accuracy, v.mean_latents, v.terminator_rate
                )?,
                None => writeln!(w, "{},{:.6},{:.6},{:.6},,,", step, loss_v, out.ce_value, out.latent_value)?,
            }
        }
        history.push(SftStepLog { step, loss: loss_v, ce: out.ce_value, latent: out.latent_value, val });

        let out_of_budget =
            cfg.max_minutes.is_some_and(|m| t0.elapsed().as_secs_f64() >= m * 60.0);
        let out_of_patience = cfg.patience.is_some_and(|p| stale >= p);
        if (out_of_budget || out_of_patience) && step < cfg.steps {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("step_{}.bin", step));
                if saved_steps.last() != Some(&path) {
                    save_checkpoint(&path, params, &vhash, step as u64)?;
                    saved_steps.push(path);
                }
            }
            break;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    Ok(SftReport { history, best_val, best_step, skipped_samples: skipped_total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};
    use crate::model::ModelConfig;

    fn tiny_run(steps: usize, seed: u64) -> (ModelParams<f32>, SftReport, Dataset, Vocabulary) {
        let vocab = Vocabulary::standard();
        let ds = generate_dataset(&DatasetConfig::easy(60, seed), &vocab).unwrap();
        let mut p = ModelParams::init(ModelConfig::tiny(vocab.len(), seed)).unwrap();
        let cfg = SftTrainConfig {
            steps,
            batch_size: 4,
            val_every: 0,
            c_choice: CompressionChoice::Fixed(2),
            seed,
            ..Default::default()
        };
        let report = train_sft(&mut p, &ds, &vocab, &cfg).unwrap();
        (p, report, ds, vocab)
    }

    #[test]
    fn loss_decreases_over_short_run() {
        let (_, report, _, _) = tiny_run(30, 3);
        let first: f64 = report.history[..5].iter().map(|h| h.loss).sum::<f64>() / 5.0;
        let last: f64 = report.history[25..].iter().map(|h| h.loss).sum::<f64>() / 5.0;
        assert!(last < first, "loss did not decrease: {} -> {}", first, last);
    }

    #[test]
    fn training_is_deterministic() {
        let (p1, r1, _, _) = tiny_run(5, 9);
        let (p2, r2, _, _) = tiny_run(5, 9);
        assert_eq!(r1.history.last().unwrap().loss, r2.history.last().unwrap().loss);
        assert_eq!(p1.tok_emb.data, p2.tok_emb.data);
    }

    #[test]
    fn log_and_checkpoints_written() {
        let vocab = Vocabulary::standard();
        let ds = generate_dataset(&DatasetConfig::easy(40, 1), &vocab).unwrap();
        let mut p = ModelParams::init(ModelConfig::tiny(vocab.len(), 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let cfg = SftTrainConfig {
            steps: 4,
            batch_size: 4,
            val_every: 2,
            val_samples: 2,
            c_choice: CompressionChoice::Fixed(1),
            log_path: Some(dir.path().join("sft.csv")),
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let report = train_sft(&mut p, &ds, &vocab, &cfg).unwrap();
        assert!(report.best_val.is_some());
        let log = std::fs::read_to_string(dir.path().join("sft.csv")).unwrap();
        assert!(log.starts_with("# config_hash="));
        assert!(log.lines().count() >= 6);
        assert!(dir.path().join("best.bin").exists());
        assert!(dir.path().join("step_4.bin").exists());
    }

    #[test]
    fn invalid_compression_rejected() {
        let vocab = Vocabulary::standard();
        let ds = generate_dataset(&DatasetConfig::easy(10, 2), &vocab).unwrap();
        let mut p = ModelParams::init(ModelConfig::tiny(vocab.len(), 2)).unwrap();
        let cfg = SftTrainConfig { c_choice: CompressionChoice::Fixed(9), ..Default::default() };
        assert!(train_sft(&mut p, &ds, &vocab, &cfg).is_err());
    }
}
