//! Adam with global-norm clipping and a step-decayed learning rate.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{AfnError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub decay: f64,
    pub decay_interval: u64,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            base_lr: 1e-4,
            decay: 0.9,
            decay_interval: 3000,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    /// `base * decay^floor(step / interval)`.
    pub fn learning_rate(&self, step: u64) -> f64 {
        let k = step / self.decay_interval.max(1);
        self.base_lr * self.decay.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("base_lr", self.base_lr > 0.0),
            ("decay", self.decay > 0.0 && self.decay <= 1.0),
            ("decay_interval", self.decay_interval > 0),
            ("clip_norm", self.clip_norm > 0.0),
            ("beta1", (0.0..1.0).contains(&self.beta1)),
            ("beta2", (0.0..1.0).contains(&self.beta2)),
            ("eps", self.eps > 0.0),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(AfnError::config(format!("optimizer.{field}"), "out of range"));
            }
        }
        Ok(())
    }
}

pub fn global_norm<F: Real>(grads: &[Tensor<F>]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients jointly so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = F::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_in_place(k);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<F>>,
    pub second: Vec<Tensor<F>>,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(config: AdamConfig, params: &ParamSet<F>) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate(self.step)
    }

    /// One Adam update. Gradients are clipped first; a non-finite gradient
    /// aborts the step before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<F>, mut grads: Vec<Tensor<F>>) -> Result<StepReport> {
        if grads.len() != params.len() {
            return Err(AfnError::dim("adam_step", &[params.len()], &[grads.len()]));
        }
        for (id, g) in params.ids().zip(&grads) {
            if g.shape() != params.get(id).shape() {
                return Err(AfnError::dim("adam_step", params.get(id).shape(), g.shape()));
            }
            if !g.is_finite() {
                return Err(AfnError::NonFinite {
                    context: format!("gradient of parameter `{}`", params.name(id)),
                });
            }
        }
        let grad_norm = clip_global_norm(&mut grads, self.config.clip_norm);
        let lr = self.learning_rate();
        self.step += 1;
        let t = self.step as i32;
        let c = &self.config;
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let bias1 = F::of(1.0 - c.beta1.powi(t));
        let bias2 = F::of(1.0 - c.beta2.powi(t));
        let (lr_f, eps) = (F::of(lr), F::of(c.eps));
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(&grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p = *p - lr_f * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(StepReport { lr, grad_norm })
    }
}
