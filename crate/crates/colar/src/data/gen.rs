//! Deterministic generator for arithmetic word problems with explicit
//! `<< a op b = c >>` reasoning chains.

use crate::data::oracle::solve_chain;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

/// One problem instance: question, reasoning chain, and answer, both as
/// surface strings and as token ids. `question_ids` ends with `<q_end>`,
/// `reasoning_ids` with `<think_end>`, `answer_ids` with `<a_end>`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenSample {
    pub question: String,
    pub reasoning: String,
    pub answer: String,
    pub question_ids: Vec<u32>,
    pub reasoning_ids: Vec<u32>,
    pub answer_ids: Vec<u32>,
    pub answer_value: i64,
}

impl TokenSample {
    /// Reasoning-chain token length, excluding the terminator.
    pub fn l_r(&self) -> usize {
        self.reasoning_ids.len() - 1
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_samples: usize,
    pub steps_min: usize,
    pub steps_max: usize,
    pub operand_min: i64,
    pub operand_max: i64,
    /// Range for the first operand of a running chain; defaults to the
    /// general operand range when unset.
    pub first_operand_min: Option<i64>,
    pub first_operand_max: Option<i64>,
    pub result_min: i64,
    pub result_max: i64,
    /// Subset of "+-*/".
    pub operators: String,
    pub integer_only: bool,
    pub seed: u64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,
}

impl DatasetConfig {
    /// 2-3 step problems over small operands.
    pub fn easy(num_samples: usize, seed: u64) -> Self {
        DatasetConfig {
            num_samples,
            steps_min: 2,
            steps_max: 3,
            operand_min: 2,
            operand_max: 99,
            first_operand_min: None,
            first_operand_max: None,
            result_min: 0,
            result_max: 999,
            operators: "+-*/".into(),
            integer_only: true,
            seed,
            split_train: 0.9,
            split_val: 0.05,
            split_test: 0.05,
        }
    }

    /// 4-6 step problems over larger operands.
    pub fn hard(num_samples: usize, seed: u64) -> Self {
        DatasetConfig {
            steps_min: 4,
            steps_max: 6,
            operand_min: 2,
            operand_max: 999,
            result_max: 9999,
            ..Self::easy(num_samples, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 || self.steps_min == 0 || self.steps_min > self.steps_max {
            return Err(Error::Config("empty sample count or step range".into()));
        }
        if self.operand_min < 0 || self.operand_min > self.operand_max {
            return Err(Error::Config("empty operand range".into()));
        }
        if self.operators.is_empty() || !self.operators.chars().all(|c| "+-*/".contains(c)) {
            return Err(Error::Config(format!("bad operator set {:?}", self.operators)));
        }
        if !self.integer_only {
            return Err(Error::Config("only integer arithmetic is supported".into()));
        }
        let total = self.split_train + self.split_val + self.split_test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split fractions sum to {}, not 1", total)));
        }
        Ok(())
    }
}

/// A generated dataset with disjoint splits sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<TokenSample>,
    pub val: Vec<TokenSample>,
    pub test: Vec<TokenSample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[TokenSample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {:?}", other))),
        }
    }

    pub fn mean_l_r(samples: &[TokenSample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        samples.iter().map(|s| s.l_r() as f64).sum::<f64>() / samples.len() as f64
    }
}

struct Draft {
    question: String,
    steps: Vec<(i64, char, i64, i64)>,
}

impl Draft {
    fn reasoning(&self) -> String {
        self.steps
            .iter()
            .map(|&(a, op, b, c)| format!("<< {} {} {} = {} >>", a, op, b, c))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn answer(&self) -> i64 {
        self.steps.last().unwrap().3
    }
}

/// Generates `cfg.num_samples` verified samples with unique question strings,
/// split deterministically into train/val/test.
pub fn generate_dataset(cfg: &DatasetConfig, vocab: &Vocabulary) -> Result<Dataset> {
    cfg.validate()?;
    let mut samples = Vec::with_capacity(cfg.num_samples);
    let mut seen = HashSet::new();
    let mut stream = 0u64;
    let max_streams = (cfg.num_samples as u64).saturating_mul(50) + 1000;
    while samples.len() < cfg.num_samples {
        if stream >= max_streams {
            return Err(Error::Generation(format!(
                "exhausted {} candidate draws for {} unique samples; constraints too tight",
                stream, cfg.num_samples
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(stream);
        stream += 1;
        let draft = match draw_draft(cfg, &mut rng) {
            Some(d) => d,
            None => continue,
        };
        if !seen.insert(draft.question.clone()) {
            continue;
        }
        let reasoning = draft.reasoning();
        let answer_value = draft.answer();
        // every emitted chain is re-verified by the independent solver
        let solved = solve_chain(&reasoning)?;
        if solved != answer_value {
            return Err(Error::Generation(format!(
                "oracle disagrees with generator: {} vs {}",
                solved, answer_value
            )));
        }
        let answer = answer_value.to_string();
        let mut question_ids = vocab.tokenize(&draft.question)?;
        question_ids.push(vocab.q_end());
        let mut reasoning_ids = vocab.tokenize(&reasoning)?;
        reasoning_ids.push(vocab.think_end());
        let mut answer_ids = vocab.tokenize(&answer)?;
        answer_ids.push(vocab.a_end());
        samples.push(TokenSample {
            question: draft.question,
            reasoning,
            answer,
            question_ids,
            reasoning_ids,
            answer_ids,
            answer_value,
        });
    }
    let n = samples.len();
    let n_train = (cfg.split_train * n as f64).round() as usize;
    let n_val = (cfg.split_val * n as f64).round() as usize;
    let n_val_end = (n_train + n_val).min(n);
    let test = samples.split_off(n_val_end);
    let val = samples.split_off(n_train.min(samples.len()));
    Ok(Dataset { config: cfg.clone(), train: samples, val, test })
}

fn draw_draft(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Option<Draft> {
    let steps = rng.gen_range(cfg.steps_min..=cfg.steps_max);
    if steps == 2 {
        // word-problem templates apply only to 2-step chains
        let t = rng.gen_range(0..8);
        if t > 0 {
            return draw_two_step_template(cfg, rng, t);
        }
    }
    draw_running_chain(cfg, rng, steps)
}

fn ops_allowed(cfg: &DatasetConfig) -> Vec<char> {
    cfg.operators.chars().collect()
}

fn draw_running_chain(cfg: &DatasetConfig, rng: &mut ChaCha8Rng, steps: usize) -> Option<Draft> {
    let lo = cfg.first_operand_min.unwrap_or(cfg.operand_min);
    let hi = cfg.first_operand_max.unwrap_or(cfg.operand_max);
    let v0 = rng.gen_range(lo..=hi);
    let mut v = v0;
    let mut clauses = String::new();
    let mut chain = Vec::new();
    for s in 0..steps {
        let last = s == steps - 1;
        let mut ops = ops_allowed(cfg);
        ops.shuffle(rng);
        let mut done = false;
        for op in ops {
            let bound_ok = |r: i64| {
                let lo_bound = if last { cfg.result_min } else { 0 };
                r >= lo_bound && r <= cfg.result_max
            };
            let picked = match op {
                '+' => {
                    let k = rng.gen_range(cfg.operand_min..=cfg.operand_max);
                    bound_ok(v + k).then_some((k, v + k, ". Then add "))
                }
                '-' => {
                    if v < cfg.operand_min {
                        None
                    } else {
                        let k = rng.gen_range(cfg.operand_min..=cfg.operand_max.min(v));
                        bound_ok(v - k).then_some((k, v - k, ". Then subtract "))
                    }
                }
                '*' => {
                    let k = rng.gen_range(2..=9.min(cfg.operand_max));
                    bound_ok(v * k).then_some((k, v * k, ". Then multiply by "))
                }
                '/' => {
                    let divisors: Vec<i64> =
                        (2..=9.min(cfg.operand_max)).filter(|&k| v > 0 && v % k == 0).collect();
                    let k = *divisors.as_slice().choose(rng)?;
                    bound_ok(v / k).then_some((k, v / k, ". Then divide by "))
                }
                _ => None,
            };
            if let Some((k, r, clause)) = picked {
                clauses.push_str(clause);
                clauses.push_str(&k.to_string());
                chain.push((v, op, k, r));
                v = r;
                done = true;
                break;
            }
        }
        if !done {
            return None;
        }
    }
    let question = format!("Start with {}{}. What is the result?", v0, clauses);
    Some(Draft { question, steps: chain })
}

fn draw_two_step_template(cfg: &DatasetConfig, rng: &mut ChaCha8Rng, t: usize) -> Option<Draft> {
    let small = |rng: &mut ChaCha8Rng| rng.gen_range(2..=9i64);
    let mid = |rng: &mut ChaCha8Rng| rng.gen_range(cfg.operand_min.max(2)..=cfg.operand_max);
    let need = |op: char| cfg.operators.contains(op);
    match t {
        // spoons: << p / n = u >> << m * u = ans >>
        1 => {
            if !(need('/') && need('*')) {
                return None;
            }
            let n = small(rng);
            let u = small(rng);
            let m = small(rng);
            let p = n * u;
            (p <= cfg.operand_max && m * u <= cfg.result_max).then(|| Draft {
                question: format!(
                    "A set of {} spoons costs ${}. If each spoon would be sold separately, how much would {} spoons cost?",
                    n, p, m
                ),
                steps: vec![(p, '/', n, u), (m, '*', u, m * u)],
            })
        }
        // marbles: << a + b = t >> << t - c = ans >>
        2 => {
            if !(need('+') && need('-')) {
                return None;
            }
            let a = mid(rng);
            let b = mid(rng);
            let sum = a + b;
            if sum > cfg.result_max {
                return None;
            }
            let c = rng.gen_range(cfg.operand_min..=cfg.operand_max.min(sum));
            Some(Draft {
                question: format!(
                    "Tom has {} marbles. He finds {} more and then gives away {}. How many marbles does he have now?",
                    a, b, c
                ),
                steps: vec![(a, '+', b, sum), (sum, '-', c, sum - c)],
            })
        }
        // pens: << n * k = t >> << t + m = ans >>
        3 => {
            if !(need('*') && need('+')) {
                return None;
            }
            let n = small(rng);
            let k = mid(rng);
            let m = mid(rng);
            let t1 = n * k;
            (t1 + m <= cfg.result_max).then(|| Draft {
                question: format!(
                    "There are {} boxes with {} pens in each box. Then {} pens are added. How many pens are there?",
                    n, k, m
                ),
                steps: vec![(n, '*', k, t1), (t1, '+', m, t1 + m)],
            })
        }
        // cookies: << a + b = t >> << t / k = ans >>
        4 => {
            if !(need('+') && need('/')) {
                return None;
            }
            let k = small(rng);
            let q = rng.gen_range(1..=cfg.operand_max.min(cfg.result_max / k).max(1));
            let sum = q * k;
            let a = rng.gen_range(1..sum.min(cfg.operand_max + 1));
            let b = sum - a;
            (b >= 1 && b <= cfg.operand_max).then(|| Draft {
                question: format!(
                    "Anna bakes {} cookies and Ben bakes {} cookies. They share them equally among {} friends. How many cookies does each friend get?",
                    a, b, k
                ),
                steps: vec![(a, '+', b, sum), (sum, '/', k, q)],
            })
        }
        // savings: << w * k = t >> << t - c = ans >>
        5 => {
            if !(need('*') && need('-')) {
                return None;
            }
            let w = mid(rng);
            let k = small(rng);
            let t1 = w * k;
            if t1 > cfg.result_max {
                return None;
            }
            let c = rng.gen_range(cfg.operand_min..=cfg.operand_max.min(t1));
            Some(Draft {
                question: format!(
                    "Every week Sam saves ${} for {} weeks. Then he spends ${}. How much money is left?",
                    w, k, c
                ),
                steps: vec![(w, '*', k, t1), (t1, '-', c, t1 - c)],
            })
        }
        // stickers: << p * s = t >> << a + t = ans >>
        6 => {
            if !(need('*') && need('+')) {
                return None;
            }
            let a = mid(rng);
            let p = small(rng);
            let s = mid(rng);
            let t1 = p * s;
            (t1 <= cfg.result_max && a + t1 <= cfg.result_max).then(|| Draft {
                question: format!(
                    "Mia has {} stickers. She buys {} packs with {} stickers in each pack. How many stickers does she have in total?",
                    a, p, s
                ),
                steps: vec![(p, '*', s, t1), (a, '+', t1, a + t1)],
            })
        }
        // candies: << a - b = t >> << t / k = ans >>
        7 => {
            if !(need('-') && need('/')) {
                return None;
            }
            let k = small(rng);
            let q = rng.gen_range(1..=cfg.operand_max.min(cfg.result_max / k).max(1));
            let t1 = q * k;
            let b = rng.gen_range(cfg.operand_min..=cfg.operand_max);
            let a = t1 + b;
            (a <= cfg.operand_max).then(|| Draft {
                question: format!(
                    "A jar holds {} candies. After {} candies are eaten, the rest is split into {} equal bags. How many candies are in each bag?",
                    a, b, k
                ),
                steps: vec![(a, '-', b, t1), (t1, '/', k, q)],
            })
        }
        _ => None,
    }
}
