//! Adam with decoupled weight decay, plus the warmup/cosine schedule.

use super::params::{GradBuffer, ParamSet};
use crate::error::{Error, Result};

/// First/second moment state for every parameter of a [`ParamSet`].
pub struct AdamState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub step: u64,
    pub lr_base: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr_base: f32, weight_decay: f32) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            step: 0,
            lr_base,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected update with decoupled weight decay:
    /// p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
    pub fn apply(&mut self, params: &mut ParamSet, grads: &GradBuffer, lr_now: f32) -> Result<()> {
        if lr_now < 0.0 {
            return Err(Error::Value(format!("adam_step: negative lr {lr_now}")));
        }
        if grads.grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam_step: {} grad buffers for {} parameters",
                grads.grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads.grads[i];
            if g.len() != p.value.numel() {
                return Err(Error::Shape(format!(
                    "adam_step: grad len {} vs param {} ({})",
                    g.len(),
                    p.value.numel(),
                    p.name
                )));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.value.data_mut();
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr_now * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[j]);
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_base`, then cosine decay to 0 at `total_steps`.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, lr_base: f32) -> Result<f32> {
    if warmup_steps >= total_steps {
        return Err(Error::Config(format!(
            "lr_schedule: warmup {warmup_steps} must be shorter than total {total_steps}"
        )));
    }
    if step > total_steps {
        return Err(Error::Value(format!(
            "lr_schedule: step {step} past total {total_steps}"
        )));
    }
    if step < warmup_steps {
        return Ok(lr_base * step as f32 / warmup_steps as f32);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(lr_base * (0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32)
}
