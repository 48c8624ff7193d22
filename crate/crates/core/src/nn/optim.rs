use serde::{Deserialize, Serialize};

use super::params::{Matrix, ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Fixed-step gradient descent.
    Sgd { step: f64 },
    Adam {
        step: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(step: f64) -> Self {
        OptimizerConfig::Adam {
            step,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies updates to a [`ParamStore`]; gradients are clipped to a global
/// norm before every step.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    clip_norm: Option<f64>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, clip_norm: Option<f64>, store: &ParamStore) -> Self {
        let zeros = || ParamGrads::zeros_like(store).0;
        let adam = matches!(config, OptimizerConfig::Adam { .. });
        Optimizer {
            config,
            clip_norm,
            m: if adam { zeros() } else { Vec::new() },
            v: if adam { zeros() } else { Vec::new() },
            t: 0,
        }
    }

    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> f64 {
        let norm = grads.norm();
        let k = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        match self.config {
            OptimizerConfig::Sgd { step } => {
                for (p, g) in store.values_mut().iter_mut().zip(&grads.0) {
                    *p -= g * (step * k);
                }
            }
            OptimizerConfig::Adam {
                step,
                beta1,
                beta2,
                eps,
            } => {
                let bc1 = 1.0 - beta1.powi(self.t as i32);
                let bc2 = 1.0 - beta2.powi(self.t as i32);
                for (i, (p, g)) in store.values_mut().iter_mut().zip(&grads.0).enumerate() {
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for j in 0..p.len() {
                        let gj = g[j] * k;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                        p[j] -= step * (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}
