use serde::{Deserialize, Serialize};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig, n: usize) -> Self {
        Self {
            cfg,
            m: vec![F::zero(); n],
            v: vec![F::zero(); n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F]) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let c = &self.cfg;
        let b1 = F::of(c.beta1);
        let b2 = F::of(c.beta2);
        let one_b1 = F::of(1.0 - c.beta1);
        let one_b2 = F::of(1.0 - c.beta2);
        let corr1 = F::of(1.0 / (1.0 - c.beta1.powf(self.t as f64)));
        let corr2 = F::of(1.0 / (1.0 - c.beta2.powf(self.t as f64)));
        let lr = F::of(c.lr);
        let eps = F::of(c.eps);
        for i in 0..params.len() {
            let g = grads[i];
            let m = b1 * self.m[i] + one_b1 * g;
            let v = b2 * self.v[i] + one_b2 * g * g;
            self.m[i] = m;
            self.v[i] = v;
            params[i] -= lr * (m * corr1) / ((v * corr2).sqrt() + eps);
        }
    }
}
