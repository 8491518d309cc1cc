//! Adam with bias correction and cosine learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{batch_gradients, LossParts, LossWeights, ParameterSet, SeqExample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Final learning rate as a fraction of the initial one.
    pub cosine_floor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            cosine_floor: 0.1,
        }
    }
}

/// Optimizer state: first/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub config: AdamConfig,
    /// Total planned steps; drives the cosine schedule. Zero disables decay.
    pub total_steps: usize,
}

impl AdamState {
    pub fn new(n_params: usize, config: AdamConfig, total_steps: usize) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0, config, total_steps }
    }

    /// Cosine-decayed learning rate for the next step.
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if self.total_steps == 0 {
            return c.learning_rate;
        }
        let progress = (self.step as f64 / self.total_steps as f64).min(1.0);
        let floor = c.learning_rate * c.cosine_floor;
        floor + 0.5 * (c.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// One parameter update from a gradient vector.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= lr * mhat / (vhat.sqrt() + c.epsilon);
        }
    }
}

/// Gradient step over one batch: reverse-mode gradients of the batch-mean
/// loss followed by an Adam update. Errors with a diagnostic if the loss or
/// any gradient stops being finite.
pub fn backward_and_step(
    params: &mut ParameterSet,
    opt: &mut AdamState,
    batch: &[SeqExample],
    weights: &LossWeights,
) -> Result<LossParts> {
    let (grads, loss) = batch_gradients(params, batch, weights)?;
    if !loss.total.is_finite() {
        return Err(Error::Divergence {
            step: opt.step,
            detail: format!("non-finite loss {:?}", loss.total),
        });
    }
    if let Some(idx) = grads.iter().position(|g| !g.is_finite()) {
        let name = params
            .structure
            .layout
            .segments
            .iter()
            .find(|(_, r)| r.contains(&idx))
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| "?".into());
        return Err(Error::Divergence {
            step: opt.step,
            detail: format!("non-finite gradient in segment {name}"),
        });
    }
    opt.apply(&mut params.values, &grads);
    Ok(loss)
}
