use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// AdamW hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.5e-4,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
    step: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter from its accumulated gradient; a parameter without one is treated as zero-gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        let grads: Vec<Vec<f32>> = params
            .iter()
            .map(|p| p.grad().map_or_else(|| vec![0.0; p.numel()], <[f32]>::to_vec))
            .collect();
        let refs: Vec<&[f32]> = grads.iter().map(Vec::as_slice).collect();
        self.step_with(params, &refs)
    }

    /// Updates `params` from explicit gradient slices.
    pub fn step_with(&mut self, params: &mut [&mut Tensor], grads: &[&[f32]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::LengthMismatch(params.len(), grads.len()));
        }
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::LengthMismatch(self.first.len(), params.len()));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.numel() != g.len() || p.numel() != m.len() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w -= c.learning_rate * (c.weight_decay * *w + m_hat / (v_hat.sqrt() + c.epsilon));
            }
            if !p.is_finite() {
                return Err(Error::NonFinite("adamw_step"));
            }
        }
        Ok(())
    }
}
