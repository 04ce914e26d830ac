//! SGD with momentum and weight decay, plus the step-decay schedule.
//!
//! Velocity lives in the optimizer, keyed by parameter uid, so one optimizer
//! can drive several parameter groups at different learning rates.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct SgdMomentum<T: Scalar> {
    pub momentum: T,
    pub weight_decay: T,
    velocity: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(
                "sgd",
                format!("momentum must be in [0,1), got {momentum}"),
            ));
        }
        if weight_decay < 0.0 {
            return Err(Error::config(
                "sgd",
                format!("weight_decay must be >= 0, got {weight_decay}"),
            ));
        }
        Ok(SgdMomentum {
            momentum: T::from_f64(momentum),
            weight_decay: T::from_f64(weight_decay),
            velocity: HashMap::new(),
        })
    }

    /// One update over a parameter group:
    ///   v <- momentum*v + grad + weight_decay*param
    ///   param <- param - lr*v
    /// Parameters without an accumulated gradient are skipped. Gradients are
    /// left in place; call `zero_grad` on the model afterwards. A zero rate
    /// still advances the velocity but leaves parameters bit-identical.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::config("sgd", format!("lr must be >= 0, got {lr}")));
        }
        let lr = T::from_f64(lr);
        for p in params.iter_mut() {
            let Some(grad) = p.grad() else { continue };
            if grad.len() != p.numel() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![grad.len()],
                });
            }
            let grad = grad.to_vec();
            let v = self
                .velocity
                .entry(p.uid())
                .or_insert_with(|| vec![T::ZERO; p.numel()]);
            let (m, wd) = (self.momentum, self.weight_decay);
            for ((vi, gi), pi) in v.iter_mut().zip(&grad).zip(p.data_mut().iter_mut()) {
                *vi = m * *vi + *gi + wd * *pi;
                *pi -= lr * *vi;
            }
        }
        Ok(())
    }

    /// Exposes velocities by parameter name for checkpointing.
    pub fn export_state(&self, named: &[(String, &Tensor<T>)]) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (name, t) in named {
            if let Some(v) = self.velocity.get(&t.uid()) {
                let vt = Tensor::from_vec(t.shape().to_vec(), v.clone())
                    .expect("velocity matches parameter shape");
                out.push((format!("optim.{name}"), vt));
            }
        }
        out
    }

    /// Restores velocities previously produced by `export_state`.
    pub fn import_state(
        &mut self,
        named: &[(String, &Tensor<T>)],
        saved: &HashMap<String, Tensor<T>>,
    ) {
        for (name, t) in named {
            if let Some(v) = saved.get(&format!("optim.{name}")) {
                if v.numel() == t.numel() {
                    self.velocity.insert(t.uid(), v.data().to_vec());
                }
            }
        }
    }
}

/// Step decay: halves the base rate every ten epochs.
pub fn lr_at_epoch(base_lr: f64, epoch: u32) -> f64 {
    base_lr * 0.5f64.powi((epoch / 10) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(vec![data.len()], data)
            .unwrap()
            .requires_grad(true)
    }

    #[test]
    fn plain_sgd_decreases_by_grad() {
        let mut p = param(vec![1.0, 2.0]);
        p.accumulate_grad(&[0.5, -0.25]);
        let mut opt = SgdMomentum::new(0.0, 0.0).unwrap();
        opt.step(&mut [&mut p], 1.0).unwrap();
        assert_eq!(p.data(), &[0.5, 2.25]);
    }

    #[test]
    fn zero_grad_zero_velocity_leaves_param_unchanged() {
        let mut p = param(vec![3.0]);
        p.accumulate_grad(&[0.0]);
        let mut opt = SgdMomentum::new(0.9, 0.0).unwrap();
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.data(), &[3.0]);
    }

    #[test]
    fn momentum_two_steps_match_hand_computation() {
        // g = 1 both steps, lr = 0.1, momentum = 0.9:
        //   v1 = 1.0,  p1 = p0 - 0.1
        //   v2 = 1.9,  p2 = p1 - 0.19
        let mut p = param(vec![0.0]);
        let mut opt = SgdMomentum::new(0.9, 0.0).unwrap();
        p.accumulate_grad(&[1.0]);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] + 0.1).abs() < 1e-12);
        p.zero_grad();
        p.accumulate_grad(&[1.0]);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.data()[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(SgdMomentum::<f64>::new(1.0, 0.0).is_err());
        assert!(SgdMomentum::<f64>::new(-0.1, 0.0).is_err());
        assert!(SgdMomentum::<f64>::new(0.9, -1e-9).is_err());
        let mut p = param(vec![1.0]);
        p.accumulate_grad(&[1.0]);
        let mut opt = SgdMomentum::<f64>::new(0.9, 0.0).unwrap();
        assert!(opt.step(&mut [&mut p], -1.0).is_err());
        assert!(opt.step(&mut [&mut p], f64::NAN).is_err());
    }

    #[test]
    fn zero_rate_step_leaves_params_bit_identical() {
        let mut p = param(vec![1.25, -0.75, 3.5]);
        let before: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
        p.accumulate_grad(&[0.3, -0.2, 0.9]);
        let mut opt = SgdMomentum::<f64>::new(0.9, 1e-4).unwrap();
        opt.step(&mut [&mut p], 0.0).unwrap();
        let after: Vec<u64> = p.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn lr_schedule_halves_every_ten_epochs() {
        assert_eq!(lr_at_epoch(5e-3, 0), 5e-3);
        assert_eq!(lr_at_epoch(5e-3, 9), 5e-3);
        assert_eq!(lr_at_epoch(5e-3, 10), 2.5e-3);
        assert_eq!(lr_at_epoch(5e-3, 29), 1.25e-3);
    }
}
