use serde::{Deserialize, Serialize};

use crate::tensor::Scalar;

/// Step-decay schedule: `lr · factor^⌊epoch / every⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

impl Default for StepDecay {
    fn default() -> Self {
        Self { every: 5, factor: 0.5 }
    }
}

impl StepDecay {
    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        base * self.factor.powi((epoch / self.every.max(1)) as i32)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<F>,
    v: Vec<F>,
    t: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, m: vec![F::zero(); len], v: vec![F::zero(); len], t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (F::from_f64(self.beta1), F::from_f64(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        // Bias correction folded into the step size.
        let step = F::from_f64(lr * c2.sqrt() / c1);
        let eps = F::from_f64(self.eps * c2.sqrt());
        let one = F::one();
        for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}
