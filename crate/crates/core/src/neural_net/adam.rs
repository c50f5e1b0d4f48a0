use serde::{Deserialize, Serialize};

use crate::error::{HedgeError, Result};

/// Bias-corrected Adam. `m`, `v` and `t` are the only mutable state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    /// Defaults: lr 1e-3, betas 0.9 / 0.999, eps 1e-8.
    pub fn new(len: usize) -> Self {
        Self::with_lr(len, 1e-3)
    }

    pub fn with_lr(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    fn check(&self, len: usize, what: &str) -> Result<()> {
        if len != self.m.len() {
            return Err(HedgeError::Shape(format!(
                "{what} has length {len}, optimizer state has {}",
                self.m.len()
            )));
        }
        Ok(())
    }

    /// Folds `grad` into the moments and returns the bias-corrected step
    /// direction `m_hat / (sqrt(v_hat) + eps)` together with the diagonal
    /// preconditioner `1 / (sqrt(v_hat) + eps)`. Parameters are untouched.
    pub fn advance(&mut self, grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check(grad.len(), "gradient")?;
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let mut direction = Vec::with_capacity(grad.len());
        let mut precond = Vec::with_capacity(grad.len());
        for ((m, v), g) in self.m.iter_mut().zip(self.v.iter_mut()).zip(grad) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let d = 1.0 / ((*v / c2).sqrt() + self.eps);
            direction.push(*m / c1 * d);
            precond.push(d);
        }
        Ok((direction, precond))
    }

    /// One descent step on `params`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        self.check(params.len(), "parameter vector")?;
        let (direction, _) = self.advance(grad)?;
        for (p, d) in params.iter_mut().zip(direction) {
            *p -= self.lr * d;
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, params: &mut [f64], grad: &[f64]) -> Result<()> {
    state.step(params, grad)
}
