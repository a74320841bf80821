//! Adam and the one-cycle learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter that has a gradient.
    pub fn step<T: Real>(&self, store: &mut ParamStore<T>, grads: &[(ParamId, Vec<T>)], lr: f64) {
        let (b1, b2) = (self.beta1, self.beta2);
        for (id, g) in grads {
            let p = store.param_entry_mut(*id);
            p.step += 1;
            let t = p.step as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let (tb1, tb2) = (T::lit(b1), T::lit(b2));
            let data = p.value.data_mut();
            for i in 0..data.len() {
                let gi = g[i];
                p.m[i] = tb1 * p.m[i] + (T::one() - tb1) * gi;
                p.v[i] = tb2 * p.v[i] + (T::one() - tb2) * gi * gi;
                let mhat = p.m[i].f64() / c1;
                let vhat = p.v[i].f64() / c2;
                data[i] = T::lit(data[i].f64() - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub max_lr: f64,
    pub total_steps: usize,
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div_factor: f64,
}

impl TrainSchedule {
    pub fn one_cycle(max_lr: f64, total_steps: usize) -> Self {
        Self {
            max_lr,
            total_steps,
            pct_start: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pct_start > 0.0 && self.pct_start < 1.0)
            || self.div_factor <= 1.0
            || self.final_div_factor <= 1.0
            || self.total_steps == 0
            || !(self.max_lr > 0.0)
        {
            return Err(Error::InvalidArgument(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    /// Step at which the rate peaks.
    pub fn peak_step(&self) -> usize {
        ((self.pct_start * self.total_steps as f64).round() as usize).min(self.total_steps - 1)
    }
}

fn cos_anneal(start: f64, end: f64, frac: f64) -> f64 {
    end + (start - end) / 2.0 * (1.0 + (PI * frac).cos())
}

/// Cosine warm-up from `max_lr/div_factor` to `max_lr` at the peak step,
/// then cosine decay to `max_lr/final_div_factor` at the last step.
pub fn onecycle_lr(s: &TrainSchedule, step: usize) -> Result<f64> {
    s.validate()?;
    if step >= s.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside schedule of {} steps",
            s.total_steps
        )));
    }
    let peak = s.peak_step();
    let last = s.total_steps - 1;
    let lr = if step <= peak {
        if peak == 0 {
            s.max_lr
        } else {
            cos_anneal(s.max_lr / s.div_factor, s.max_lr, step as f64 / peak as f64)
        }
    } else {
        cos_anneal(s.max_lr, s.max_lr / s.final_div_factor, (step - peak) as f64 / (last - peak) as f64)
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_param("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        Adam::default().step(&mut s, &[(id, vec![0.0; 3])], 0.1);
        assert_eq!(s.param(id).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_param("w", Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        Adam::default().step(&mut s, &[(id, vec![3.0, -0.02, 7e3])], 0.01);
        for (v, sign) in s.param(id).data().iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - 0.01 * sign).abs() < 1e-8);
        }
    }

    #[test]
    fn quadratic_decreases() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_param("w", Tensor::scalar(1.0));
        let adam = Adam::default();
        let mut prev = 1.0;
        for _ in 0..2 {
            let w = s.param(id).item();
            adam.step(&mut s, &[(id, vec![2.0 * w])], 0.1);
            assert!(s.param(id).item() < prev);
            prev = s.param(id).item();
        }
        let id2 = s.add_param("w2", Tensor::scalar(1.0));
        let mut loss = 1.0;
        for _ in 0..100 {
            let w = s.param(id2).item();
            adam.step(&mut s, &[(id2, vec![2.0 * w])], 1e-3);
            let l = s.param(id2).item().powi(2);
            assert!(l < loss);
            loss = l;
        }
    }

    #[test]
    fn schedule_endpoints_and_continuity() {
        let s = TrainSchedule::one_cycle(7e-4, 1000);
        assert!((onecycle_lr(&s, 0).unwrap() - 7e-4 / 25.0).abs() < 1e-15);
        assert!((onecycle_lr(&s, 300).unwrap() - 7e-4).abs() < 1e-9);
        assert!((onecycle_lr(&s, 999).unwrap() - 7e-4 / 1e4).abs() < 1e-9);
        assert!(onecycle_lr(&s, 1000).is_err());
        // steepest point of each cosine half-wave
        let bound = PI / 2.0 * s.max_lr / (s.pct_start * s.total_steps as f64);
        for t in 1..1000 {
            let d = (onecycle_lr(&s, t).unwrap() - onecycle_lr(&s, t - 1).unwrap()).abs();
            assert!(d <= bound);
        }
    }
}
