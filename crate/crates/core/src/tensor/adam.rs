use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Moment estimates and step counter, one slot per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            config,
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// Adam with bias correction.
pub struct Adam;

impl Adam {
    /// Applies one update to every parameter in `store` using its gradient
    /// buffer. Fails without touching anything if a buffer is missing.
    pub fn step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
        let c = state.config;
        if !(c.lr > 0.0) {
            return Err(TensorError::InvalidOptimizer(format!(
                "learning rate must be positive, got {}",
                c.lr
            )));
        }
        let missing: Vec<String> = store
            .iter()
            .filter(|(_, _, t)| t.grad().is_none())
            .map(|(_, n, _)| n.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(TensorError::MissingGrads { names: missing });
        }
        if state.m.len() != store.len()
            || store.iter().zip(&state.m).any(|((_, _, t), m)| t.len() != m.len())
        {
            return Err(TensorError::InvalidOptimizer(
                "state does not match parameter layout".into(),
            ));
        }
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (k, p) in store.tensors_mut().iter_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut state.m[k], &mut state.v[k]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}
