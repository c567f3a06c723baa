//! AdamW over a [`ParamStore`].

use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup: 0,
        }
    }
}

/// Moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    fn current_lr(&self) -> f64 {
        let w = self.config.warmup as f64;
        if w > 0.0 && (self.t as f64) < w {
            self.config.lr * self.t as f64 / w
        } else {
            self.config.lr
        }
    }

    /// One update from the accumulated gradients, which are zeroed afterwards.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        let c = self.config;
        let lr = self.current_lr();
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .values_and_grads_mut()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, gr), mi), vi) in p.data_mut().iter_mut().zip(g.data_mut()).zip(m).zip(v) {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * *gr;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * *gr * *gr;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
                *gr = 0.0;
            }
        }
    }
}
