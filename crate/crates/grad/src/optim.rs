use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Adam hyperparameters. A nonzero `weight_decay` gives AdamW (decoupled
/// decay applied directly to the weights, scaled by the learning rate).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adamw(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// Discriminator setting: no first-moment momentum, no decay.
    pub fn gan(lr: f64) -> Self {
        Self::adamw(lr, 0.0, 0.99, 0.0)
    }
}

/// Adam state for one parameter store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update with the configured learning rate.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        let lr = self.config.lr;
        self.step_lr(store, grads, lr)
    }

    /// One update with an explicit learning rate (for schedules). Parameters
    /// absent from `grads` are left untouched, decay included.
    pub fn step_lr(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (id, g) in grads {
            let i = id.index();
            if i >= self.m.len() {
                return invalid("adam", format!("parameter {i} unknown to optimizer"));
            }
            if g.shape() != store.get(*id).shape() {
                return invalid("adam", format!("gradient shape {:?} for {}", g.shape(), store.name(*id)));
            }
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let w = store.get_mut(*id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j].f64();
                let mj = beta1 * m[j].f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let mut wj = w[j].f64();
                if weight_decay != 0.0 {
                    wj -= lr * weight_decay * wj;
                }
                wj -= lr * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                w[j] = T::of(wj);
            }
        }
        Ok(())
    }

    pub(crate) fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    pub(crate) fn from_parts(config: AdamConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Self {
        Self { config, step, m, v }
    }
}

/// Linear warmup followed by cosine decay to `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let t = (step.saturating_sub(self.warmup_steps) as f64 / span as f64).min(1.0);
        self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Scales all gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Real>(grads: &mut [(ParamId, Tensor<T>)], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
