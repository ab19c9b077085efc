//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::matrix::Matrix;
use crate::autodiff::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates for every parameter of a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &ParamSet) -> Self {
        let zeros = || {
            params
                .values()
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One optimizer step over every parameter. `grads` is indexed like the
    /// parameter set.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) {
        assert_eq!(grads.len(), params.len(), "one gradient per parameter");
        self.step += 1;
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            adamw_update(&self.config, self.step, p, &grads[i], &mut self.m[i], &mut self.v[i]);
        }
    }
}

/// Applies decay `p -= lr * wd * p`, then the bias-corrected Adam move,
/// for optimizer step `step` (1-based).
pub fn adamw_update(
    cfg: &AdamWConfig,
    step: u64,
    param: &mut Matrix,
    grad: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
) {
    debug_assert_eq!(param.shape(), grad.shape());
    let t = step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let p = param.data_mut();
    let g = grad.data();
    let m = m.data_mut();
    let v = v.data_mut();
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] = p[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
