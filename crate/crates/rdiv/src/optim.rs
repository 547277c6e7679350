//! Shared first-order optimizer: Adam with decoupled weight decay.

use crate::scalar::Scalar;
use nalgebra::DVector;
use num_traits::Float;

/// Adam hyperparameters. The moment constants follow the common
/// (0.9, 0.999, 1e-8) convention.
#[derive(Debug, Clone)]
pub struct AdamConfig<S: Scalar> {
    pub learning_rate: S,
    pub beta1: S,
    pub beta2: S,
    pub epsilon: S,
    /// Decoupled weight decay, applied directly to the parameters.
    pub weight_decay: S,
}

impl<S: Scalar> AdamConfig<S> {
    pub fn new(learning_rate: S) -> Self {
        Self {
            learning_rate,
            beta1: S::of(0.9),
            beta2: S::of(0.999),
            epsilon: S::of(1e-8),
            weight_decay: S::of(0.0),
        }
    }

    pub fn with_weight_decay(mut self, wd: S) -> Self {
        self.weight_decay = wd;
        self
    }
}

/// Adam state: bias-corrected first and second moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    cfg: AdamConfig<S>,
    m: DVector<S>,
    v: DVector<S>,
    step: u64,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig<S>, dim: usize) -> Self {
        Self {
            cfg,
            m: DVector::zeros(dim),
            v: DVector::zeros(dim),
            step: 0,
        }
    }

    pub fn learning_rate(&self) -> S {
        self.cfg.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: S) {
        self.cfg.learning_rate = lr;
    }

    /// One update in place. `grad` must have the same length as `params`.
    pub fn step(&mut self, params: &mut DVector<S>, grad: &DVector<S>) {
        debug_assert_eq!(params.len(), grad.len());
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let one = S::of(1.0);
        let bc1 = one - Float::powi(b1, t);
        let bc2 = one - Float::powi(b2, t);
        let lr = self.cfg.learning_rate;
        let wd = self.cfg.weight_decay;
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let mut p = params[i];
            p = p - lr * m_hat / (Float::sqrt(v_hat) + self.cfg.epsilon);
            if wd > S::of(0.0) {
                p = p - lr * wd * p;
            }
            params[i] = p;
        }
    }
}
