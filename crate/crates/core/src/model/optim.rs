//! AdamW with decoupled weight decay and a linear warm-up/decay schedule.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{GradientBundle, ModelParams, ParamGroup};
use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_ratio: f64,
    /// Rescale the gradient when its global norm exceeds this; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_ratio: 0.1,
            max_grad_norm: Some(1.0),
        }
    }
}

/// Serializable moment estimates, for resuming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    config: AdamWConfig,
    total_steps: u64,
    trainable: Vec<bool>,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    /// Optimizer over the tensors of `params` whose group is in `groups`.
    pub fn new(config: AdamWConfig, params: &ModelParams, total_steps: u64, groups: &[ParamGroup]) -> AdamW {
        let zeros = || params.tensors.iter().map(|t| Array2::zeros(t.dim())).collect::<Vec<_>>();
        AdamW {
            config,
            total_steps: total_steps.max(1),
            trainable: params.groups().iter().map(|g| groups.contains(g)).collect(),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    fn warmup_steps(&self) -> u64 {
        (self.config.warmup_ratio * self.total_steps as f64).ceil() as u64
    }

    /// Learning rate for the zero-based update `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        let factor = if step < warm {
            (step + 1) as f64 / warm as f64
        } else if self.total_steps > warm {
            (self.total_steps.saturating_sub(step)) as f64 / (self.total_steps - warm) as f64
        } else {
            0.0
        };
        self.config.lr * factor.max(0.0)
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientBundle) -> Result<(), ModelError> {
        if !grads.is_finite() {
            return Err(ModelError::NonFinite("gradient".into()));
        }
        let norm = grads
            .tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(g, _)| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.config.max_grad_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let lr = self.learning_rate_at(self.step);
        self.step += 1;
        let c = &self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads.tensors[i]);
            ndarray::Zip::from(tensor).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * clip;
                *p *= 1.0 - lr * c.weight_decay;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + c.eps);
            });
        }
        Ok(())
    }

    pub fn state(&self) -> AdamWState {
        let flat = |ts: &[Array2<f64>]| ts.iter().map(|t| t.iter().copied().collect()).collect();
        AdamWState { step: self.step, m: flat(&self.m), v: flat(&self.v) }
    }

    pub fn restore(&mut self, state: AdamWState) -> Result<(), ModelError> {
        let fill = |dst: &mut [Array2<f64>], src: Vec<Vec<f64>>| -> Result<(), ModelError> {
            if dst.len() != src.len() {
                return Err(ModelError::Shape("optimizer state has the wrong tensor count".into()));
            }
            for (d, s) in dst.iter_mut().zip(src) {
                if d.len() != s.len() {
                    return Err(ModelError::Shape("optimizer state has the wrong tensor size".into()));
                }
                d.iter_mut().zip(s).for_each(|(x, y)| *x = y);
            }
            Ok(())
        };
        fill(&mut self.m, state.m)?;
        fill(&mut self.v, state.v)?;
        self.step = state.step;
        Ok(())
    }
}
