//! AdamW: adaptive moments with decoupled weight decay, restricted to a
//! trainable mask over the flat parameter buffer.

use alloc::vec;
use alloc::vec::Vec;

use libm::{pow, sqrt};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, n_params: usize) -> Self {
        AdamW { cfg, m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }

    /// One update over the trainable coordinates. Bias-corrected moments,
    /// weight decay applied directly to the parameter (decoupled).
    pub fn step(&mut self, data: &mut [f64], grad: &[f64], trainable: &[bool]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - pow(c.beta1, self.t as f64);
        let bc2 = 1.0 - pow(c.beta2, self.t as f64);
        for i in 0..data.len() {
            if !trainable[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            data[i] -= c.lr * (mhat / (sqrt(vhat) + c.eps) + c.weight_decay * data[i]);
        }
    }
}
