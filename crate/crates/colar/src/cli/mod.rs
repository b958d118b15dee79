//! Operator commands: data generation, the two training stages, evaluation,
//! analysis, and artifact verification, all driven by one TOML run config.

use crate::data::{
    config_hash, generate_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, Vocabulary,
};
use crate::error::{Error, Result};
use crate::infer::{evaluate, generate, latent_retrieval, mean_ci95, GenConfig};
use crate::model::cache::{embed_token, layer_growth};
use crate::model::checkpoint::load_checkpoint;
use crate::model::{ModelConfig, ModelParams};
use crate::rl::{train_rl, RlTrainConfig};
use crate::sft::{train_sft, SftTrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Which split to score: train, val, or test.
    pub split: String,
    pub c_list: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Cap on scored samples per (c, seed) cell.
    pub samples: usize,
    pub max_latents: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            split: "test".into(),
            c_list: vec![1, 2, 3, 4],
            seeds: vec![0, 1, 2, 3, 4],
            samples: 200,
            max_latents: 64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeSection {
    pub c_list: Vec<usize>,
    /// Number of test questions profiled.
    pub questions: usize,
    /// Retrieval depth per latent.
    pub top_k: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        AnalyzeSection { c_list: vec![1, 2, 3, 4], questions: 5, top_k: 5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RlSection {
    /// Starting weights; defaults to the SFT best checkpoint in the run dir.
    pub init_checkpoint: Option<PathBuf>,
    pub train: RlTrainConfig,
}

impl Default for RlSection {
    fn default() -> Self {
        RlSection { init_checkpoint: None, train: RlTrainConfig::default() }
    }
}

/// The whole run in one document. Every command serializes the merged config
/// into the run directory before doing any work, so a run is reproducible
/// from `config.toml` plus the dataset files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub sft: SftTrainConfig,
    pub rl: RlSection,
    pub eval: EvalSection,
    pub analyze: AnalyzeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let vocab_size = Vocabulary::standard().len();
        RunConfig {
            seed: 0,
            dataset: DatasetConfig::easy(50_000, 0),
            model: ModelConfig::desk(vocab_size, 0),
            sft: SftTrainConfig::default(),
            rl: RlSection::default(),
            eval: EvalSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad run config: {}", e)))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("unserializable: {}", e)))
    }

    /// Pushes one seed into every stage so a single flag controls the run.
    pub fn override_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        self.model.seed = seed;
        self.sft.seed = seed;
        self.rl.train.seed = seed;
    }

    /// Highest compression factor the SFT stage trains on.
    pub fn trained_c_max(&self) -> usize {
        let (crate::sft::CompressionChoice::Fixed(c)
        | crate::sft::CompressionChoice::Uniform(c)) = self.sft.c_choice;
        c
    }
}

/// Loads the config for a command: an explicit `--config` path wins, then
/// the run directory's `config.toml`, then built-in defaults.
pub fn resolve_config(config: Option<&Path>, run_dir: &Path) -> Result<RunConfig> {
    let path = match config {
        Some(p) => Some(p.to_path_buf()),
        None => {
            let p = run_dir.join("config.toml");
            p.exists().then_some(p)
        }
    };
    match path {
        Some(p) => RunConfig::from_toml(&fs::read_to_string(&p)?),
        None => Ok(RunConfig::default()),
    }
}

/// Writes the merged config into the run directory so later commands and
/// `verify` see exactly what this command ran with.
pub fn persist_config(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn data_dir(run_dir: &Path) -> PathBuf {
    run_dir.join("data")
}

fn stage_paths(run_dir: &Path, stage: &str) -> (PathBuf, PathBuf) {
    let dir = run_dir.join(stage);
    (dir.join("log.csv"), dir)
}

/// Latest `step_N.bin` in a checkpoint directory, for resuming.
fn latest_step_checkpoint(dir: &Path) -> Option<(PathBuf, usize)> {
    let mut best: Option<(PathBuf, usize)> = None;
    let entries = fs::read_dir(dir).ok()?;
    for e in entries.flatten() {
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("step_").and_then(|s| s.strip_suffix(".bin")) {
            if let Ok(step) = n.parse::<usize>() {
                if best.as_ref().map_or(true, |(_, b)| step > *b) {
                    best = Some((e.path(), step));
                }
            }
        }
    }
    best
}

pub fn cmd_gen_data(cfg: &RunConfig, run_dir: &Path, force: bool) -> Result<()> {
    let dir = data_dir(run_dir);
    if dir.join("meta.json").exists() && !force {
        return Err(Error::Config(format!(
            "dataset already exists at {}; pass --force to regenerate",
            dir.display()
        )));
    }
    persist_config(cfg, run_dir)?;
    let vocab = Vocabulary::standard();
    let ds = generate_dataset(&cfg.dataset, &vocab)?;
    save_dataset(&dir, &ds, &vocab)?;
    println!("dataset written to {}", dir.display());
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        println!("  {}: {} samples, mean reasoning length {:.2}", name, split.len(), Dataset::mean_l_r(split));
    }
    Ok(())
}

fn load_run_dataset(run_dir: &Path) -> Result<(Dataset, Vocabulary)> {
    let dir = data_dir(run_dir);
    if !dir.join("meta.json").exists() {
        return Err(Error::Config(format!(
            "no dataset at {}; run gen-data first",
            dir.display()
        )));
    }
    load_dataset(&dir)
}

fn check_model_vocab(cfg: &RunConfig, vocab: &Vocabulary) -> Result<()> {
    if cfg.model.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocab_size {} does not match vocabulary size {}",
            cfg.model.vocab_size,
            vocab.len()
        )));
    }
    Ok(())
}

pub fn cmd_train_sft(cfg: &RunConfig, run_dir: &Path, force: bool) -> Result<()> {
    let (ds, vocab) = load_run_dataset(run_dir)?;
    check_model_vocab(cfg, &vocab)?;
    let (log_path, ckpt_dir) = stage_paths(run_dir, "sft");
    let mut tcfg = cfg.sft.clone();
    tcfg.log_path = Some(log_path);
    tcfg.checkpoint_dir = Some(ckpt_dir.clone());
    let mut params;
    match latest_step_checkpoint(&ckpt_dir) {
        Some((path, step)) if !force => {
            let (loaded, _, _) = load_checkpoint(&path, Some(&vocab.hash()))?;
            if loaded.cfg != cfg.model {
                return Err(Error::Config(
                    "checkpoint model shape differs from the configured model".into(),
                ));
            }
            params = loaded;
            if step >= tcfg.steps {
                println!("sft already complete at step {}", step);
                return Ok(());
            }
            tcfg.start_step = step;
            println!("resuming from {} at step {}", path.display(), step);
        }
        _ => {
            params = ModelParams::init(cfg.model.clone())?;
        }
    }
    persist_config(cfg, run_dir)?;
    let report = train_sft(&mut params, &ds, &vocab, &tcfg)?;
    println!(
        "sft finished: {} steps run, {} oversize samples skipped",
        report.history.len(),
        report.skipped_samples
    );
    if let Some(v) = &report.best_val {
        println!(
            "best validation (step {}): accuracy {:.3}, mean latents {:.2}",
            report.best_step, v.accuracy, v.mean_latents
        );
    }
    Ok(())
}

pub fn cmd_train_rl(cfg: &RunConfig, run_dir: &Path, force: bool) -> Result<()> {
    let (ds, vocab) = load_run_dataset(run_dir)?;
    check_model_vocab(cfg, &vocab)?;
    let (log_path, ckpt_dir) = stage_paths(run_dir, "rl");
    let mut tcfg = cfg.rl.train.clone();
    tcfg.log_path = Some(log_path);
    tcfg.checkpoint_dir = Some(ckpt_dir.clone());
    let init = match &cfg.rl.init_checkpoint {
        Some(p) => p.clone(),
        None => run_dir.join("sft").join("best.bin"),
    };
    let mut params;
    match latest_step_checkpoint(&ckpt_dir) {
        Some((path, step)) if !force => {
            let (loaded, _, _) = load_checkpoint(&path, Some(&vocab.hash()))?;
            params = loaded;
            if step >= tcfg.steps {
                println!("rl already complete at step {}", step);
                return Ok(());
            }
            tcfg.start_step = step;
            println!("resuming from {} at step {}", path.display(), step);
        }
        _ => {
            if !init.exists() {
                return Err(Error::Config(format!(
                    "no starting checkpoint at {}; train sft first or set rl.init_checkpoint",
                    init.display()
                )));
            }
            let (loaded, _, _) = load_checkpoint(&init, Some(&vocab.hash()))?;
            params = loaded;
        }
    }
    if params.cfg != cfg.model {
        return Err(Error::Config(
            "checkpoint model shape differs from the configured model".into(),
        ));
    }
    persist_config(cfg, run_dir)?;
    let history = train_rl(&mut params, &ds, &vocab, &tcfg)?;
    if let Some(last) = history.last() {
        println!(
            "rl finished at step {}: mean reward {:.3}, mean latents {:.2}",
            last.step, last.mean_reward, last.mean_latents
        );
    }
    Ok(())
}

/// Picks the checkpoint a read-only command should use: an explicit path,
/// else the RL best, else the SFT best.
pub fn resolve_checkpoint(run_dir: &Path, explicit: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    for stage in ["rl", "sft"] {
        let p = run_dir.join(stage).join("best.bin");
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Config(format!(
        "no best checkpoint under {}; pass --checkpoint",
        run_dir.display()
    )))
}

pub fn cmd_eval(
    cfg: &RunConfig,
    run_dir: &Path,
    checkpoint: Option<&Path>,
    deterministic: bool,
) -> Result<()> {
    let (ds, vocab) = load_run_dataset(run_dir)?;
    let ckpt = resolve_checkpoint(run_dir, checkpoint)?;
    let (params, _, _) = load_checkpoint(&ckpt, Some(&vocab.hash()))?;
    let split = ds.split(&cfg.eval.split)?;
    let n = cfg.eval.samples.min(split.len());
    if n == 0 {
        return Err(Error::Validation(format!("split {} is empty", cfg.eval.split)));
    }
    let samples = &split[..n];
    let out_dir = run_dir.join("eval");
    fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("metrics.csv");
    let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
    writeln!(w, "# config_hash={}", config_hash(cfg))?;
    writeln!(w, "c,seed,n,accuracy,accuracy_ci95,mean_latents,terminator_rate")?;
    let c_max = cfg.trained_c_max();
    for &c in &cfg.eval.c_list {
        if c > c_max {
            eprintln!(
                "warning: c={} is beyond the trained range (max {}); extrapolating",
                c, c_max
            );
        }
        let gcfg = GenConfig {
            c,
            deterministic,
            max_latents: cfg.eval.max_latents,
            ..Default::default()
        };
        let mut accs = Vec::new();
        let mut lats = Vec::new();
        for &seed in &cfg.eval.seeds {
            let s = evaluate(&params, &vocab, samples, &gcfg, seed)?;
            writeln!(
                w,
                "{},{},{},{:.4},,{:.3},{:.3}",
                c, seed, s.n, s.accuracy, s.mean_latents, s.terminator_rate
            )?;
            accs.push(s.accuracy);
            lats.push(s.mean_latents);
        }
        let lat_mean = lats.iter().sum::<f64>() / lats.len() as f64;
        if accs.len() >= 2 {
            let (mean, half) = mean_ci95(&accs)?;
            writeln!(w, "{},mean,{},{:.4},{:.4},{:.3},", c, n, mean, half, lat_mean)?;
            println!("c={}: accuracy {:.3} +- {:.3}, mean latents {:.2}", c, mean, half, lat_mean);
        } else {
            writeln!(w, "{},mean,{},{:.4},,{:.3},", c, n, accs[0], lat_mean)?;
            println!("c={}: accuracy {:.3}, mean latents {:.2}", c, accs[0], lat_mean);
        }
    }
    w.flush()?;
    println!("metrics written to {}", path.display());
    Ok(())
}

/// Sum of a token group's embeddings scaled by the inverse square root of
/// the group size, matching the training-time compression.
fn compress_group(p: &ModelParams<f32>, ids: &[u32]) -> Vec<f32> {
    let d = p.cfg.d_model;
    let mut v = vec![0f32; d];
    for &id in ids {
        for (a, b) in v.iter_mut().zip(embed_token(p, id)) {
            *a += b;
        }
    }
    let s = 1.0 / (ids.len() as f32).sqrt();
    v.iter_mut().for_each(|x| *x *= s);
    v
}

pub fn cmd_analyze(
    cfg: &RunConfig,
    run_dir: &Path,
    checkpoint: Option<&Path>,
    deterministic: bool,
) -> Result<()> {
    let (ds, vocab) = load_run_dataset(run_dir)?;
    let ckpt = resolve_checkpoint(run_dir, checkpoint)?;
    let (params, _, _) = load_checkpoint(&ckpt, Some(&vocab.hash()))?;
    let n = cfg.analyze.questions.min(ds.test.len());
    if n == 0 {
        return Err(Error::Validation("no test questions to analyze".into()));
    }
    let out_dir = run_dir.join("analyze");
    fs::create_dir_all(&out_dir)?;
    let ret_path = out_dir.join("retrieval.csv");
    let mut ret = std::io::BufWriter::new(fs::File::create(&ret_path)?);
    writeln!(ret, "# config_hash={}", config_hash(cfg))?;
    writeln!(ret, "question,c,source,latent,rank,token,cosine,in_group")?;
    for (qi, sample) in ds.test[..n].iter().enumerate() {
        // reasoning tokens without the trailing terminator
        let r_ids = &sample.reasoning_ids[..sample.reasoning_ids.len() - 1];
        for &c in &cfg.analyze.c_list {
            // teacher-forced compressed groups with in-group hit marks
            for (gi, group) in r_ids.chunks(c).enumerate() {
                let z = compress_group(&params, group);
                for (rank, (tok, cos)) in
                    latent_retrieval(&params, &z, cfg.analyze.top_k)?.into_iter().enumerate()
                {
                    let hit = group.contains(&tok);
                    writeln!(
                        ret,
                        "{},{},teacher,{},{},{},{:.4},{}",
                        qi,
                        c,
                        gi,
                        rank + 1,
                        vocab.token(tok).replace(',', ";"),
                        cos,
                        hit as u8
                    )?;
                }
            }
            // generated latents plus a layer-growth profile of the pass
            let gcfg = GenConfig { c, deterministic, ..Default::default() };
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let g = generate(&params, &vocab, &sample.question_ids, &gcfg, &mut rng)?;
            for (li, latent) in g.latents.iter().enumerate() {
                for (rank, (tok, cos)) in
                    latent_retrieval(&params, latent, cfg.analyze.top_k)?.into_iter().enumerate()
                {
                    writeln!(
                        ret,
                        "{},{},generated,{},{},{},{:.4},",
                        qi,
                        c,
                        li,
                        rank + 1,
                        vocab.token(tok).replace(',', ";"),
                        cos
                    )?;
                }
            }
            let mut rows: Vec<Vec<f32>> = vec![embed_token(&params, vocab.bos())];
            rows.push(embed_token(&params, vocab.ctrl(c)));
            rows.extend(sample.question_ids.iter().map(|&id| embed_token(&params, id)));
            rows.extend(g.latents.iter().cloned());
            rows.push(embed_token(&params, vocab.think_end()));
            rows.extend(g.answer_ids.iter().map(|&id| embed_token(&params, id)));
            let growth = layer_growth(&params, &rows)?;
            let path = out_dir.join(format!("q{}_c{}_profile.csv", qi, c));
            let mut w = std::io::BufWriter::new(fs::File::create(&path)?);
            writeln!(w, "# config_hash={}", config_hash(cfg))?;
            writeln!(w, "layer,relative_growth")?;
            for (li, gr) in growth.iter().enumerate() {
                writeln!(w, "{},{:.6}", li, gr)?;
            }
            w.flush()?;
        }
    }
    ret.flush()?;
    println!("analysis written to {}", out_dir.display());
    Ok(())
}

fn first_line_hash(path: &Path) -> Result<Option<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("# config_hash="))
        .map(|h| h.to_string()))
}

/// Recomputes config hashes for every artifact in the run directory and
/// reloads datasets and checkpoints. Any mismatch is an error.
pub fn cmd_verify(run_dir: &Path) -> Result<()> {
    let cfg_path = run_dir.join("config.toml");
    if !cfg_path.exists() {
        return Err(Error::Config(format!("no config.toml under {}", run_dir.display())));
    }
    let cfg = RunConfig::from_toml(&fs::read_to_string(&cfg_path)?)?;
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool, detail: String| {
        println!("{}: {}{}", name, if ok { "ok" } else { "FAIL" }, detail);
        if !ok {
            failures += 1;
        }
    };

    let ddir = data_dir(run_dir);
    if ddir.join("meta.json").exists() {
        match load_dataset(&ddir) {
            Ok((ds, vocab)) => {
                check("dataset files", true, String::new());
                let stored: serde_json::Value =
                    serde_json::from_str(&fs::read_to_string(ddir.join("meta.json"))?)?;
                let recomputed = config_hash(&ds.config);
                let ok = stored["config_hash"] == serde_json::Value::String(recomputed.clone());
                check("dataset config hash", ok, String::new());
                let ok = config_hash(&ds.config) == config_hash(&cfg.dataset);
                check(
                    "dataset matches run config",
                    ok,
                    if ok { String::new() } else { " (dataset was generated from a different config)".into() },
                );
                for stage in ["sft", "rl"] {
                    for name in ["best.bin"] {
                        let p = run_dir.join(stage).join(name);
                        if p.exists() {
                            let ok = load_checkpoint(&p, Some(&vocab.hash())).is_ok();
                            check(&format!("{} {}", stage, name), ok, String::new());
                        }
                    }
                    if let Some((p, _)) = latest_step_checkpoint(&run_dir.join(stage)) {
                        let ok = load_checkpoint(&p, Some(&vocab.hash())).is_ok();
                        check(
                            &format!("{} {}", stage, p.file_name().unwrap().to_string_lossy()),
                            ok,
                            String::new(),
                        );
                    }
                }
            }
            Err(e) => check("dataset files", false, format!(" ({})", e)),
        }
    }

    for stage in ["sft", "rl"] {
        let log = run_dir.join(stage).join("log.csv");
        if log.exists() {
            let found = first_line_hash(&log)?;
            let (log_path, ckpt_dir) = stage_paths(run_dir, stage);
            let expect = if stage == "sft" {
                let mut t = cfg.sft.clone();
                t.log_path = Some(log_path);
                t.checkpoint_dir = Some(ckpt_dir);
                config_hash(&t)
            } else {
                let mut t = cfg.rl.train.clone();
                t.log_path = Some(log_path);
                t.checkpoint_dir = Some(ckpt_dir);
                config_hash(&t)
            };
            // resumed runs keep the original header; re-hash with every
            // plausible resume point before declaring a mismatch
            let mut ok = found.as_deref() == Some(expect.as_str());
            if !ok && stage == "sft" {
                for s in 1..cfg.sft.steps {
                    let (log_path, ckpt_dir) = stage_paths(run_dir, stage);
                    let mut t = cfg.sft.clone();
                    t.log_path = Some(log_path);
                    t.checkpoint_dir = Some(ckpt_dir);
                    t.start_step = s;
                    if found.as_deref() == Some(config_hash(&t).as_str()) {
                        ok = true;
                        break;
                    }
                }
            }
            check(&format!("{} log hash", stage), ok, String::new());
        }
    }

    let eval = run_dir.join("eval").join("metrics.csv");
    if eval.exists() {
        let ok = first_line_hash(&eval)? == Some(config_hash(&cfg));
        check("eval metrics hash", ok, String::new());
    }
    let ret = run_dir.join("analyze").join("retrieval.csv");
    if ret.exists() {
        let ok = first_line_hash(&ret)? == Some(config_hash(&cfg));
        check("analysis hash", ok, String::new());
    }

    if failures > 0 {
        return Err(Error::Validation(format!("{} artifact check(s) failed", failures)));
    }
    println!("all artifacts verified");
    Ok(())
}
