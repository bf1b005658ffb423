//! Adaptive-moment optimiser and cosine learning-rate schedule.

use alloc::vec;
use alloc::vec::Vec;

use crate::params::ParamSet;
use crate::real::Real;

/// Cosine decay from `max` at step 0 to `min` at step `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub max: f64,
    pub min: f64,
    pub total: u64,
}

impl CosineSchedule {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total == 0 {
            return self.max;
        }
        let t = step.min(self.total) as f64 / self.total as f64;
        self.min + 0.5 * (self.max - self.min) * (1.0 + num_traits::Float::cos(core::f64::consts::PI * t))
    }
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        let zeros = |p: &crate::params::Param<T>| vec![T::zero(); p.data().len()];
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|(_, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, p)| zeros(p)).collect(),
        }
    }

    /// One update with learning rate `lr`; parameters without a gradient are untouched.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &[Option<Vec<T>>], lr: f64) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let bc1 = 1.0 - num_traits::Float::powi(self.beta1, self.step as i32);
        let bc2 = 1.0 - num_traits::Float::powi(self.beta2, self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if lr == 0.0 {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = params.data_mut(id);
            for j in 0..data.len() {
                m[j] = b1 * m[j] + one_b1 * g[j];
                v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
                data[j] -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}
