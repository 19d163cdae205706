use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay after warm-up.
    pub final_lr_frac: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 2e-4, warmup: 2000, final_lr_frac: 1.0, weight_decay: 0.0, grad_clip: 1.0 }
    }
}

impl OptimConfig {
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

pub fn global_grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += super::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

/// AdamW with linear warm-up, cosine decay and global-norm clipping.
pub struct Trainer {
    opt: AdamW,
    vars: Vec<Var>,
    config: OptimConfig,
    total_steps: usize,
    step: usize,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, config: OptimConfig, total_steps: usize) -> Result<Self> {
        let params = ParamsAdamW {
            lr: config.lr_at(0, total_steps),
            weight_decay: config.weight_decay,
            ..Default::default()
        };
        Ok(Self { opt: AdamW::new(vars.clone(), params)?, vars, config, total_steps, step: 0 })
    }

    /// Backpropagates `loss` and applies one update. Non-finite losses abort training.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let value = super::scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Divergence { step: self.step, loss: value });
        }
        let mut grads = loss.backward()?;
        if self.config.grad_clip > 0.0 {
            let norm = global_grad_norm(&grads, &self.vars)?;
            if !norm.is_finite() {
                return Err(Error::Divergence { step: self.step, loss: norm });
            }
            if norm > self.config.grad_clip {
                let scale = self.config.grad_clip / norm;
                for v in &self.vars {
                    if let Some(g) = grads.remove(v.as_tensor()) {
                        grads.insert(v.as_tensor(), (g * scale)?);
                    }
                }
            }
        }
        self.opt.set_learning_rate(self.config.lr_at(self.step, self.total_steps));
        self.opt.step(&grads)?;
        self.step += 1;
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_decay() {
        let c = OptimConfig { lr: 1.0, warmup: 10, final_lr_frac: 0.1, ..Default::default() };
        assert!((c.lr_at(0, 110) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9, 110) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10, 110) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(110, 110) - 0.1).abs() < 1e-12);
    }
}
