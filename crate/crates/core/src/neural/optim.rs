//! AdamW with decoupled weight decay and a cosine-annealed learning rate.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<DMatrix<f64>>,
    pub second_moment: Vec<DMatrix<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: AdamWConfig) -> Self {
        let zeros = params.zeros_like().tensors;
        OptimizerState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// One AdamW update. Returns `false` (and leaves everything untouched)
    /// when the gradient contains non-finite values.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads, lr: f64) -> bool {
        if !grads.all_finite() {
            return false;
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((pv, &gv), mv), vv) in p.value.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *pv);
            }
        }
        true
    }
}

/// Cosine annealing from `max_lr` at step 0 to `min_lr` at `total_steps`.
pub fn cosine_lr(step: u64, total_steps: u64, max_lr: f64, min_lr: f64) -> f64 {
    assert!(total_steps > 0, "total_steps must be positive");
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    min_lr + 0.5 * (max_lr - min_lr) * (1.0 + (PI * frac).cos())
}
