//! AdamW with decoupled weight decay over the flat parameter vector.

use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    #[must_use]
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    /// One update with the given learning rate. Weight decay is decoupled:
    /// `p -= lr*wd*p` happens alongside (not inside) the moment update, so
    /// decay strength does not depend on gradient scale.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count fixed at creation");
        assert_eq!(grads.len(), self.m.len(), "gradient count fixed at creation");
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] = params[i] - lr * weight_decay * params[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }

    #[must_use]
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    #[must_use]
    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// Raw state for snapshotting: (first moments, second moments, step).
    #[must_use]
    pub fn parts(&self) -> (&[f64], &[f64], u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn from_parts(
        cfg: AdamConfig,
        m: Vec<f64>,
        v: Vec<f64>,
        t: u64,
    ) -> Result<Self, ModelError> {
        if m.len() != v.len() {
            return Err(ModelError::ShapeMismatch("optimizer moments".into()));
        }
        Ok(Self { cfg, m, v, t })
    }
}
