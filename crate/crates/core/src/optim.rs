//! Bias-corrected Adam over a flat slice of real parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SonicError};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SonicError::config(
                "lr",
                format!("must be > 0, got {}", self.lr),
            ));
        }
        for (key, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(SonicError::config(
                    key,
                    format!("must lie in [0, 1), got {b}"),
                ));
            }
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(SonicError::config(
                "eps",
                format!("must be >= 0, got {}", self.eps),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<T>,
    v: Vec<T>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn first_moment(&self) -> &[T] {
        &self.m
    }

    pub fn second_moment(&self) -> &[T] {
        &self.v
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One in-place update: `params -= update(grad)`.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(SonicError::config(
                "adam",
                format!(
                    "parameter length {} does not match optimizer state {}",
                    params.len(),
                    self.m.len()
                ),
            ));
        }
        let delta = self.update(grad)?;
        for (p, d) in params.iter_mut().zip(delta) {
            *p -= d;
        }
        Ok(())
    }

    /// Advances the moments with `grad` and returns the bias-corrected step
    /// `lr * m_hat / (sqrt(v_hat) + eps)` to subtract from the parameters.
    /// The step counter advances before bias correction.
    pub fn update(&mut self, grad: &[T]) -> Result<Vec<T>> {
        if grad.len() != self.m.len() {
            return Err(SonicError::config(
                "adam",
                format!(
                    "gradient length {} does not match optimizer state {}",
                    grad.len(),
                    self.m.len()
                ),
            ));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(SonicError::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let one = T::one();
        let bc1 = one - T::lit(self.config.beta1.powi(self.step as i32));
        let bc2 = one - T::lit(self.config.beta2.powi(self.step as i32));
        let lr = T::lit(self.config.lr);
        let eps = T::lit(self.config.eps);
        Ok(grad
            .iter()
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .map(|(&g, (m, v))| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                lr * m_hat / (v_hat.sqrt() + eps)
            })
            .collect())
    }
}
