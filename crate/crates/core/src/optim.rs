//! Adam with per-group state.

use crate::error::{Error, Result};
use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moments for one parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

pub fn check_finite<T: Real>(name: &str, grads: &[T]) -> Result<()> {
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}[{i}] is {}", grads[i])));
    }
    Ok(())
}

impl<T: Real> Adam<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update; zeroes `grads` afterwards.
    pub fn step(&mut self, name: &str, params: &mut [T], grads: &mut [T], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                got: params.len().min(grads.len()),
                context: "optimizer state",
            });
        }
        check_finite(name, grads)?;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        // lr * m_hat / (sqrt(v_hat) + eps) with the corrections folded in.
        let step_size = T::lit(lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2.sqrt());
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (c1, c2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let eps = T::lit(self.eps);
        for (((p, g), m), v) in params.iter_mut().zip(grads.iter_mut()).zip(&mut self.m).zip(&mut self.v) {
            let gi = *g;
            *m = b1 * *m + c1 * gi;
            *v = b2 * *v + c2 * gi * gi;
            *p -= step_size * *m / (v.sqrt() * inv_bc2 + eps);
            *g = T::zero();
        }
        Ok(())
    }
}

/// Exponential decay from `lr` to `lr * final_ratio` over `total` iterations.
pub fn decayed_lr(lr: f64, final_ratio: f64, iter: usize, total: usize) -> f64 {
    if total == 0 {
        return lr;
    }
    lr * final_ratio.powf(iter as f64 / total as f64)
}
