use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction, no weight decay, and a linearly decaying
/// learning rate with zero warmup.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter. `schedule_fraction` is the
    /// fraction of training already completed; the effective learning rate is
    /// `lr · (1 − schedule_fraction)`.
    pub fn step(&mut self, store: &mut ParamStore, schedule_fraction: f64) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if let Some((_, name, _)) = store
            .iter()
            .find(|(_, _, t)| t.requires_grad() && t.grad().is_none())
        {
            return Err(Error::Tape(format!("parameter {name} has no gradient")));
        }
        let fraction = schedule_fraction.clamp(0.0, 1.0);
        let lr = self.config.lr * (1.0 - fraction);
        self.step += 1;
        let AdamConfig {
            beta1, beta2, eps, ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((t, m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            if !t.requires_grad() {
                continue;
            }
            let (data, grad) = t.data_and_grad_mut();
            let grad = grad.expect("checked above");
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
