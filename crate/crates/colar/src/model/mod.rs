//! Decoder-only transformer with a weight-tied language head and a Gaussian
//! latent head that predicts the next compressed embedding.

pub mod cache;
pub mod checkpoint;
pub mod forward;

use crate::error::{Error, Result};
use crate::tensor::scalar::Scalar;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Clamp range for the predicted latent standard deviation.
pub const SIGMA_MIN: f64 = 1e-4;
/// Ceiling on the predicted latent std (normalized space). Kept tight so the
/// NLL's 1/sigma^2 factor cannot throttle the mean gradient at positions the
/// model finds hard early in training; targets are deterministic given the
/// question, so the optimum is unaffected.
pub const SIGMA_MAX: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    /// Width of the latent head's hidden layers.
    pub latent_hidden: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Default training-scale configuration.
    pub fn desk(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq: 160,
            latent_hidden: 512,
            init_std: 0.02,
            seed,
        }
    }

    /// Small configuration for exhaustive gradient checks.
    pub fn tiny(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq: 48,
            latent_hidden: 24,
            init_std: 0.05,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_seq == 0 || self.latent_hidden == 0
        {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams<S: Scalar> {
    pub wq: Tensor<S>,
    pub wk: Tensor<S>,
    pub wv: Tensor<S>,
    pub wo: Tensor<S>,
    pub norm1: Tensor<S>,
    pub norm2: Tensor<S>,
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
}

/// Two GELU hidden layers, then parallel mean and log-std projections.
#[derive(Debug, Clone)]
pub struct LatentHead<S: Scalar> {
    pub w1: Tensor<S>,
    pub b1: Tensor<S>,
    pub w2: Tensor<S>,
    pub b2: Tensor<S>,
    pub w_mu: Tensor<S>,
    pub b_mu: Tensor<S>,
    pub w_sigma: Tensor<S>,
    pub b_sigma: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct ModelParams<S: Scalar> {
    pub cfg: ModelConfig,
    /// Token embedding table, also used transposed as the language head.
    pub tok_emb: Tensor<S>,
    pub pos_emb: Tensor<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: Tensor<S>,
    pub latent: LatentHead<S>,
    /// Std of the embedding table entries, frozen when training starts;
    /// latent targets are divided by it and samples multiplied back.
    pub sigma_e: f64,
}

fn randn_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| S::from_f64(<StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * std))
        .collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn ones<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::new(&[n], vec![S::ONE; n]).expect("shape matches data")
}

fn zeros<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::zeros(&[n])
}

impl<S: Scalar> ModelParams<S> {
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (d, ff, h) = (cfg.d_model, cfg.d_ff, cfg.latent_hidden);
        let mut tok_emb: Tensor<S> = randn_tensor(&mut rng, &[cfg.vocab_size, d], cfg.init_std);
        // center each embedding dimension so compressed sums of embeddings
        // stay zero-mean regardless of token mix
        for i in 0..d {
            let mean: f64 = (0..cfg.vocab_size)
                .map(|r| tok_emb.data[r * d + i].to_f64())
                .sum::<f64>()
                / cfg.vocab_size as f64;
            for r in 0..cfg.vocab_size {
                let v = tok_emb.data[r * d + i].to_f64() - mean;
                tok_emb.data[r * d + i] = S::from_f64(v);
            }
        }
        let pos_emb = randn_tensor(&mut rng, &[cfg.max_seq, d], cfg.init_std);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                wq: randn_tensor(&mut rng, &[d, d], cfg.init_std),
                wk: randn_tensor(&mut rng, &[d, d], cfg.init_std),
                wv: randn_tensor(&mut rng, &[d, d], cfg.init_std),
                wo: randn_tensor(&mut rng, &[d, d], cfg.init_std),
                norm1: ones(d),
                norm2: ones(d),
                w1: randn_tensor(&mut rng, &[d, ff], cfg.init_std),
                b1: zeros(ff),
                w2: randn_tensor(&mut rng, &[ff, d], cfg.init_std),
                b2: zeros(d),
            })
            .collect();
        let latent = LatentHead {
            w1: randn_tensor(&mut rng, &[d, h], cfg.init_std),
            b1: zeros(h),
            w2: randn_tensor(&mut rng, &[h, h], cfg.init_std),
            b2: zeros(h),
            w_mu: randn_tensor(&mut rng, &[h, d], cfg.init_std),
            b_mu: zeros(d),
            w_sigma: randn_tensor(&mut rng, &[h, d], cfg.init_std),
            b_sigma: zeros(d),
        };
        let mut me = ModelParams {
            cfg,
            tok_emb,
            pos_emb,
            layers,
            final_norm: ones(d),
            latent,
            sigma_e: 0.0,
        };
        me.sigma_e = me.compute_sigma_e();
        Ok(me)
    }

    /// Std of all embedding table entries around their global mean.
    pub fn compute_sigma_e(&self) -> f64 {
        let n = self.tok_emb.data.len();
        let mean: f64 = self.tok_emb.data.iter().map(|x| x.to_f64()).sum::<f64>() / n as f64;
        let var: f64 = self
            .tok_emb
            .data
            .iter()
            .map(|x| {
                let d = x.to_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / n as f64;
        var.sqrt()
    }

    /// All trainable tensors paired with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> =
            vec![("tok_emb".into(), &self.tok_emb), ("pos_emb".into(), &self.pos_emb)];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, t) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("norm1", &l.norm1),
                ("norm2", &l.norm2),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{}.{}", i, n), t));
            }
        }
        out.push(("final_norm".into(), &self.final_norm));
        for (n, t) in [
            ("w1", &self.latent.w1),
            ("b1", &self.latent.b1),
            ("w2", &self.latent.w2),
            ("b2", &self.latent.b2),
            ("w_mu", &self.latent.w_mu),
            ("b_mu", &self.latent.b_mu),
            ("w_sigma", &self.latent.w_sigma),
            ("b_sigma", &self.latent.b_sigma),
        ] {
            out.push((format!("latent.{}", n), t));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out: Vec<&mut Tensor<S>> = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in self.layers.iter_mut() {
            out.extend([
                &mut l.wq,
                &mut l.wk,
                &mut l.wv,
                &mut l.wo,
                &mut l.norm1,
                &mut l.norm2,
                &mut l.w1,
                &mut l.b1,
                &mut l.w2,
                &mut l.b2,
            ]);
        }
        out.push(&mut self.final_norm);
        let lt = &mut self.latent;
        out.extend([
            &mut lt.w1,
            &mut lt.b1,
            &mut lt.w2,
            &mut lt.b2,
            &mut lt.w_mu,
            &mut lt.b_mu,
            &mut lt.w_sigma,
            &mut lt.b_sigma,
        ]);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }
}
