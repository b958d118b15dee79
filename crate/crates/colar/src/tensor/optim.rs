//! AdamW with decoupled weight decay and global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm clip applied before every step; <= 0 disables.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, weight_decay: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip: 1.0 }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
pub struct OptimizerState {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new<S: Scalar>(cfg: AdamWConfig, params: &[&Tensor<S>]) -> Self {
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        OptimizerState { cfg, step: 0, m, v }
    }

    /// One decoupled-weight-decay update with bias-corrected moments.
    /// Gradients must be populated on every parameter; they are zeroed
    /// after the update.
    pub fn step<S: Scalar>(&mut self, params: &mut [&mut Tensor<S>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract("adamw_step", "parameter count does not match state"));
        }
        for (i, p) in params.iter().enumerate() {
            match &p.grad {
                None => return Err(Error::contract("adamw_step", format!("parameter {} has no gradient", i))),
                Some(g) if g.len() != p.numel() => {
                    return Err(Error::contract("adamw_step", format!("gradient shape mismatch on parameter {}", i)))
                }
                _ => {}
            }
        }
        // global-norm clip
        let mut scale = 1.0f64;
        if self.cfg.grad_clip > 0.0 {
            let mut sq = 0.0f64;
            for p in params.iter() {
                for x in p.grad.as_ref().unwrap() {
                    let x = x.to_f64();
                    sq += x * x;
                }
            }
            let norm = sq.sqrt();
            if norm > self.cfg.grad_clip {
                scale = self.cfg.grad_clip / norm;
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad.take().unwrap();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                let gj = g[j].to_f64() * scale;
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * gj;
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let mut w = p.data[j].to_f64();
                w -= self.cfg.lr * (mhat / (vhat.sqrt() + self.cfg.eps) + self.cfg.weight_decay * w);
                p.data[j] = S::from_f64(w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn zero_grad_zero_decay_is_noop() {
        let mut p = one_param(1.5);
        p.grad = Some(vec![0.0]);
        let cfg = AdamWConfig { weight_decay: 0.0, grad_clip: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &[&p]);
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data[0], 1.5);
    }

    #[test]
    fn first_step_is_minus_lr() {
        // constant gradient 1: bias correction makes the ratio ~1 on step 1
        let mut p = one_param(0.0);
        p.grad = Some(vec![1.0]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, grad_clip: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &[&p]);
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.data[0] + 0.1).abs() < 1e-6, "got {}", p.data[0]);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut p = one_param(0.0);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &[&p]);
        assert!(matches!(opt.step(&mut [&mut p]), Err(crate::Error::Contract { .. })));
    }

    #[test]
    fn gradients_zeroed_after_step() {
        let mut p = one_param(0.0);
        p.grad = Some(vec![1.0]);
        let mut opt = OptimizerState::new(AdamWConfig::default(), &[&p]);
        opt.step(&mut [&mut p]).unwrap();
        assert!(p.grad.is_none());
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(w) = (w - 3)^2 from w = 0
        let mut p = one_param(0.0);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, grad_clip: 0.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &[&p]);
        for _ in 0..100 {
            let w = p.data[0];
            p.grad = Some(vec![2.0 * (w - 3.0)]);
            opt.step(&mut [&mut p]).unwrap();
        }
        assert!((p.data[0] - 3.0).abs() < 0.1, "got {}", p.data[0]);
    }

    #[test]
    fn global_norm_clip_scales_update_direction() {
        // gradient [30, 40] has norm 50; clip at 1.0 rescales to [0.6, 0.8]
        let mut p = Tensor::<f64>::new(&[2], vec![0.0, 0.0]).unwrap();
        p.grad = Some(vec![30.0, 40.0]);
        let cfg = AdamWConfig { lr: 1e-3, weight_decay: 0.0, grad_clip: 1.0, ..Default::default() };
        let mut opt = OptimizerState::new(cfg, &[&p]);
        opt.step(&mut [&mut p]).unwrap();
        // both coordinates move by lr (sign direction), ratio of moments preserved
        assert!(p.data[0] < 0.0 && p.data[1] < 0.0);
        assert!((opt.m[0][0] - 0.06).abs() < 1e-12);
        assert!((opt.m[0][1] - 0.08).abs() < 1e-12);
    }
}
