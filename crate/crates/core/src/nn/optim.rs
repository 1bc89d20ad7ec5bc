//! Adam with linear warm-up and optional decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::{Gradients, ParamStore};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Decoupled (AdamW-style) decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, warmup_steps: 0, weight_decay: 0.0 }
    }
}

impl AdamConfig {
    /// Learning rate at 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.lr
        } else {
            self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self { config, step: 0, v: m.clone(), m }
    }

    /// Applies one update. Frozen parameters are skipped; a trainable
    /// parameter without a gradient is an error.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NnError> {
        self.step += 1;
        let c = self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step.min(i32::MAX as u64) as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step.min(i32::MAX as u64) as i32);
        for (i, p) in store.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let g = grads.grads.get(i).and_then(|g| g.as_deref()).ok_or_else(|| NnError::MissingGrad(p.name.clone()))?;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.value.data.iter_mut().enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                let mut x = f64::from(*w);
                if c.weight_decay > 0.0 {
                    x -= lr * c.weight_decay * x;
                }
                x -= lr * mhat / (vhat.sqrt() + c.eps);
                *w = x as f32;
            }
        }
        Ok(())
    }
}
