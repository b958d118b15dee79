//! Reinforcement-learning loop: group rollouts per question, group-relative
//! advantages, and minibatched clipped-surrogate updates.

use crate::data::{io::config_hash, Dataset, TokenSample, Vocabulary};
use crate::error::{Error, Result};
use crate::infer::{evaluate, GenConfig};
use crate::model::checkpoint::save_checkpoint;
use crate::model::forward::pull_grads;
use crate::model::ModelParams;
use crate::rl::grpo::{grpo_loss, GrpoConfig};
use crate::rl::rollout::{group_advantages, sample_rollout, Rollout, RolloutConfig};
use crate::tensor::optim::{AdamWConfig, OptimizerState};
use crate::tensor::tape::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlTrainConfig {
    pub steps: usize,
    /// Questions rolled out per step.
    pub rollout_questions: usize,
    /// Rollouts per question (the advantage group).
    pub group_size: usize,
    /// Groups per optimizer update.
    pub minibatch_groups: usize,
    pub rollout: RolloutConfig,
    pub grpo: GrpoConfig,
    pub optim: AdamWConfig,
    pub seed: u64,
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Deterministic validation cadence in steps; 0 disables it.
    pub val_every: usize,
    pub val_samples: usize,
    /// Resume point: training runs steps `start_step+1..=steps` and appends
    /// to an existing log.
    #[serde(default)]
    pub start_step: usize,
    /// Wall-clock budget; the loop stops after the first step exceeding it.
    #[serde(default)]
    pub max_minutes: Option<f64>,
}

impl Default for RlTrainConfig {
    fn default() -> Self {
        RlTrainConfig {
            steps: 100,
            rollout_questions: 8,
            group_size: 8,
            minibatch_groups: 4,
            rollout: RolloutConfig { c: 2, max_latents: 24, max_answer_tokens: 8, sigma_temp: 1.0 },
            grpo: GrpoConfig::default(),
            optim: AdamWConfig { lr: 1e-6, ..Default::default() },
            seed: 0,
            log_path: None,
            checkpoint_dir: None,
            val_every: 20,
            val_samples: 100,
            start_step: 0,
            max_minutes: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RlStepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_latents: f64,
    pub skipped_groups: usize,
    pub updates: usize,
    pub clip_fraction: f64,
    pub loss: f64,
    pub val: Option<crate::infer::EvalSummary>,
}

/// One RL iteration: rollouts for a batch of questions, then clipped
/// surrogate updates over the surviving groups. Groups whose rewards are
/// all equal are skipped; a step with no surviving group performs no update.
pub fn rl_step(
    params: &mut ModelParams<f32>,
    vocab: &Vocabulary,
    questions: &[&TokenSample],
    cfg: &RlTrainConfig,
    opt: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
    step: usize,
) -> Result<RlStepStats> {
    if questions.is_empty() || cfg.group_size < 2 {
        return Err(Error::Validation("need at least one question and group size >= 2".into()));
    }
    let mut groups: Vec<(Vec<Rollout>, Vec<f64>)> = Vec::new();
    let mut reward_sum = 0.0;
    let mut latent_sum = 0usize;
    let mut total = 0usize;
    let mut skipped = 0usize;
    for q in questions {
        let mut rollouts = Vec::with_capacity(cfg.group_size);
        for _ in 0..cfg.group_size {
            let r = sample_rollout(params, vocab, q, &cfg.rollout, rng)?;
            reward_sum += r.reward;
            latent_sum += r.latents.len();
            total += 1;
            rollouts.push(r);
        }
        let rewards: Vec<f64> = rollouts.iter().map(|r| r.reward).collect();
        match group_advantages(&rewards) {
            Some(adv) => groups.push((rollouts, adv)),
            None => skipped += 1,
        }
    }
    let mut clip_sum = 0.0;
    let mut loss_sum = 0.0;
    let mut updates = 0usize;
    for chunk in groups.chunks(cfg.minibatch_groups.max(1)) {
        let pairs: Vec<(&Rollout, f64)> = chunk
            .iter()
            .flat_map(|(rs, adv)| rs.iter().zip(adv.iter().copied()))
            .collect();
        let mut tape: Tape<f32> = Tape::new();
        let out = grpo_loss(&mut tape, params, vocab, &pairs, &cfg.grpo)?;
        loss_sum += tape.value(out.loss)[0] as f64;
        clip_sum += out.clip_fraction;
        tape.backward(out.loss)?;
        pull_grads(&tape, &out.tm, params);
        drop(tape);
        let mut refs = params.params_mut();
        opt.step(&mut refs)?;
        updates += 1;
    }
    Ok(RlStepStats {
        step,
        mean_reward: reward_sum / total as f64,
        mean_latents: latent_sum as f64 / total as f64,
        skipped_groups: skipped,
        updates,
        clip_fraction: if updates > 0 { clip_sum / updates as f64 } else { 0.0 },
        loss: if updates > 0 { loss_sum / updates as f64 } else { 0.0 },
        val: None,
    })
}

/// Full RL run over the training split with CSV logging.
pub fn train_rl(
    params: &mut ModelParams<f32>,
    ds: &Dataset,
    vocab: &Vocabulary,
    cfg: &RlTrainConfig,
) -> Result<Vec<RlStepStats>> {
    if ds.train.is_empty() {
        return Err(Error::Validation("empty training split".into()));
    }
    if cfg.start_step >= cfg.steps {
        return Err(Error::Config(format!(
            "resume point {} is at or past the step budget {}",
            cfg.start_step, cfg.steps
        )));
    }
    let mut log = match &cfg.log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir)?;
            }
            if cfg.start_step > 0 && p.exists() {
                Some(BufWriter::new(File::options().append(true).open(p)?))
            } else {
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "# config_hash={}", config_hash(cfg))?;
                writeln!(
                    w,
                    "step,mean_reward,mean_latents,skipped_groups,updates,clip_fraction,loss,val_accuracy,val_mean_latents"
                )?;
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
    let mut history = Vec::with_capacity(cfg.steps);
    let mut best_val: Option<crate::infer::EvalSummary> = None;
    let mut best_step = 0usize;
    let mut saved_steps: Vec<PathBuf> = Vec::new();
    let vhash = vocab.hash();
    for step in cfg.start_step + 1..=cfg.steps {
        let mut qs = Vec::with_capacity(cfg.rollout_questions);
        for _ in 0..cfg.rollout_questions {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            qs.push(&ds.train[order[cursor]]);
            cursor += 1;
        }
        let mut stats = rl_step(params, vocab, &qs, cfg, &mut opt, &mut rng, step)?;

        if cfg.val_every > 0 && (step % cfg.val_every == 0 || step == cfg.steps) {
            let n = cfg.val_samples.min(ds.val.len());
            if n > 0 {
                let gcfg = GenConfig {
                    c: cfg.rollout.c,
                    deterministic: true,
                    max_latents: cfg.rollout.max_latents,
                    max_answer_tokens: cfg.rollout.max_answer_tokens,
                    ..Default::default()
                };
                let summary = evaluate(params, vocab, &ds.val[..n], &gcfg, cfg.seed)?;
                if best_val
                    .as_ref()
                    .map_or(true, |b| crate::sft::train::better(&summary, step, b, best_step))
                {
                    best_val = Some(summary.clone());
                    best_step = step;
                    if let Some(dir) = &cfg.checkpoint_dir {
                        save_checkpoint(&dir.join("best.bin"), params, &vhash, step as u64)?;
                    }
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
                stats.val = Some(summary);
            }
        }

        if let Some(w) = log.as_mut() {
            let (va, vl) = match &stats.val {
                Some(v) => (format!("{:.4}", v.accuracy), format!("{:.3}", v.mean_latents)),
                None => (String::new(), String::new()),
            };
            writeln!(
                w,
                "{},{:.4},{:.3},{},{},{:.4},{:.6},{},{}",
                stats.step,
                stats.mean_reward,
                stats.mean_latents,
                stats.skipped_groups,
                stats.updates,
                stats.clip_fraction,
                stats.loss,
                va,
                vl
            )?;
        }
        history.push(stats);

        let out_of_budget =
            cfg.max_minutes.is_some_and(|m| t0.elapsed().as_secs_f64() >= m * 60.0);
        if out_of_budget && step < cfg.steps {
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
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetConfig};
    use crate::model::ModelConfig;
    use crate::rl::grpo::grpo_loss;

    fn setup() -> (ModelParams<f32>, Vocabulary, Dataset) {
        let vocab = Vocabulary::standard();
        let ds = generate_dataset(&DatasetConfig::easy(20, 5), &vocab).unwrap();
        let p = ModelParams::init(ModelConfig::tiny(vocab.len(), 6)).unwrap();
        (p, vocab, ds)
    }

    #[test]
    fn replayed_logprobs_match_sampling_policy() {
        // same parameters: every per-element ratio should sit near 1
        let (p, vocab, ds) = setup();
        let rcfg = RolloutConfig { c: 1, max_latents: 5, max_answer_tokens: 5, sigma_temp: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = sample_rollout(&p, &vocab, &ds.train[0], &rcfg, &mut rng).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let out = grpo_loss(&mut tape, &p, &vocab, &[(&r, 1.0)], &GrpoConfig::default()).unwrap();
        assert!(
            (out.mean_ratio - 1.0).abs() < 0.05,
            "mean ratio {} drifted from 1",
            out.mean_ratio
        );
        assert!(out.clip_fraction < 0.2);
    }

    #[test]
    fn grpo_loss_backward_produces_gradients() {
        let (mut p, vocab, ds) = setup();
        let rcfg = RolloutConfig { c: 2, max_latents: 4, max_answer_tokens: 4, sigma_temp: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = sample_rollout(&p, &vocab, &ds.train[0], &rcfg, &mut rng).unwrap();
        let b = sample_rollout(&p, &vocab, &ds.train[1], &rcfg, &mut rng).unwrap();
        let mut tape: Tape<f32> = Tape::new();
        let out = grpo_loss(&mut tape, &p, &vocab, &[(&a, 1.0), (&b, -1.0)], &GrpoConfig::default())
            .unwrap();
        tape.backward(out.loss).unwrap();
        pull_grads(&tape, &out.tm, &mut p);
        assert!(p.tok_emb.grad.as_ref().unwrap().iter().any(|&g| g != 0.0));
        assert!(p.latent.w_mu.grad.is_some());
    }

    #[test]
    fn rl_step_runs_and_reports() {
        let (mut p, vocab, ds) = setup();
        let cfg = RlTrainConfig {
            rollout_questions: 2,
            group_size: 4,
            minibatch_groups: 2,
            rollout: RolloutConfig { c: 1, max_latents: 4, max_answer_tokens: 4, sigma_temp: 1.0 },
            ..Default::default()
        };
        let mut opt = {
            let refs: Vec<&crate::tensor::Tensor<f32>> =
                p.named().into_iter().map(|(_, t)| t).collect();
            OptimizerState::new(cfg.optim.clone(), &refs)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let qs: Vec<&TokenSample> = ds.train.iter().take(2).collect();
        let stats = rl_step(&mut p, &vocab, &qs, &cfg, &mut opt, &mut rng, 1).unwrap();
        assert!(stats.mean_reward >= 0.0 && stats.mean_reward <= 1.0);
        assert!(stats.mean_latents <= 4.0);
        assert!(stats.clip_fraction.is_finite());
    }

    #[test]
    fn all_equal_groups_make_step_a_noop() {
        // an untrained model earns reward 0 everywhere: every group is
        // skipped and parameters stay bit-identical
        let (mut p, vocab, ds) = setup();
        let before = p.tok_emb.data.clone();
        let cfg = RlTrainConfig {
            rollout_questions: 2,
            group_size: 3,
            rollout: RolloutConfig { c: 1, max_latents: 3, max_answer_tokens: 3, sigma_temp: 1.0 },
            ..Default::default()
        };
        let mut opt = {
            let refs: Vec<&crate::tensor::Tensor<f32>> =
                p.named().into_iter().map(|(_, t)| t).collect();
            OptimizerState::new(cfg.optim.clone(), &refs)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qs: Vec<&TokenSample> = ds.train.iter().take(2).collect();
        let stats = rl_step(&mut p, &vocab, &qs, &cfg, &mut opt, &mut rng, 1).unwrap();
        if stats.updates == 0 {
            assert_eq!(p.tok_emb.data, before);
            assert_eq!(stats.skipped_groups, 2);
        }
    }

    #[test]
    fn train_rl_writes_log() {
        let (mut p, vocab, ds) = setup();
        let dir = tempfile::tempdir().unwrap();
        let cfg = RlTrainConfig {
            steps: 2,
            rollout_questions: 2,
            group_size: 2,
            rollout: RolloutConfig { c: 1, max_latents: 3, max_answer_tokens: 3, sigma_temp: 1.0 },
            log_path: Some(dir.path().join("rl.csv")),
            ..Default::default()
        };
        let history = train_rl(&mut p, &ds, &vocab, &cfg).unwrap();
        assert_eq!(history.len(), 2);
        let log = std::fs::read_to_string(dir.path().join("rl.csv")).unwrap();
        assert!(log.starts_with("# config_hash="));
        assert_eq!(log.lines().count(), 4);
    }
}
