use serde::{Deserialize, Serialize};

use super::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW moment estimates and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl OptimState {
    pub fn new(config: AdamWConfig, like: &ModelParams) -> Self {
        Self { config, m: like.zeros_like(), v: like.zeros_like(), step: 0 }
    }
}

/// One AdamW update with bias correction and decoupled weight decay:
///
/// `θ ← θ − lr·wd·θ − lr·m̂ / (√v̂ + ε)`
pub fn adamw_step(state: &mut OptimState, params: &mut ModelParams, grads: &ModelParams) {
    assert!(params.same_shape(grads) && params.same_shape(&state.m), "optimizer shape mismatch");
    state.step += 1;
    let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    let grads = grads.tensors();
    for (((p, m), v), (_, _, g)) in params
        .tensors_mut()
        .into_iter()
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
        .zip(grads)
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] - lr * weight_decay * p[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Exponential moving average of the parameters, refreshed every
/// `interval` batches.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: ModelParams,
    pub decay: f64,
    pub interval: u64,
    pub counter: u64,
}

impl EmaState {
    pub fn new(params: &ModelParams, decay: f64, interval: u64) -> Self {
        assert!(decay > 0.0 && decay < 1.0, "EMA decay must lie in (0, 1)");
        assert!(interval >= 1, "EMA interval must be positive");
        Self { shadow: params.clone(), decay, interval, counter: 0 }
    }

    /// Called once per batch; blends in `params` when the counter is a
    /// multiple of the interval.
    pub fn update(&mut self, params: &ModelParams) {
        if self.counter % self.interval == 0 {
            let d = self.decay;
            for (s, (_, _, p)) in self.shadow.tensors_mut().into_iter().zip(params.tensors()) {
                for (sv, pv) in s.iter_mut().zip(p) {
                    *sv = d * *sv + (1.0 - d) * pv;
                }
            }
        }
        self.counter += 1;
    }
}

/// Everything the training loops carry between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub optim: OptimState,
    pub ema: EmaState,
}

impl TrainState {
    pub fn fresh(params: ModelParams, adam: AdamWConfig, ema_decay: f64, ema_interval: u64) -> Self {
        Self {
            optim: OptimState::new(adam, &params),
            ema: EmaState::new(&params, ema_decay, ema_interval),
            params,
        }
    }
}
