//! Plain n-dimensional value type. Shapes are row-major; `grad`, when
//! present, always matches `data` in length.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    uid: u64,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "tensor" });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; numel],
            requires_grad: false,
            grad: None,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// He-style init: normal with std sqrt(2 / fan_in).
    pub fn he_normal(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.normal() * std))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }

    /// Fan-in uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual
    /// dense-layer scaling. Keeps head logits small at init so untrained
    /// cross-entropy sits near ln(num_classes).
    pub fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| T::from_f64(rng.uniform(-bound, bound)))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn is_param(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Replaces the payload, keeping shape and identity.
    pub fn set_data(&mut self, data: &[T]) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "set_data",
                lhs: self.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn accumulate_grad(&mut self, src: &[T]) {
        debug_assert_eq!(src.len(), self.data.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::ZERO; self.data.len()]);
        for (a, b) in g.iter_mut().zip(src) {
            *a += *b;
        }
    }

    /// Accumulates `scale * src`, used for gradient averaging across a batch.
    pub fn accumulate_grad_scaled(&mut self, src: &[T], scale: T) {
        debug_assert_eq!(src.len(), self.data.len());
        let g = self
            .grad
            .get_or_insert_with(|| vec![T::ZERO; self.data.len()]);
        for (a, b) in g.iter_mut().zip(src) {
            *a += scale * *b;
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Stable identity used to match tape leaves and optimizer slots.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        let mut t = Tensor::<U> {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        };
        t.requires_grad = self.requires_grad;
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data_length() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn non_finite_payload_rejected() {
        let err = Tensor::<f32>::from_vec(vec![2], vec![1.0, f32::NAN]);
        assert!(matches!(err, Err(Error::NonFinite { .. })));
        let err = Tensor::<f64>::from_vec(vec![1], vec![f64::INFINITY]);
        assert!(err.is_err());
    }

    #[test]
    fn grad_accumulates_additively() {
        let mut t = Tensor::<f64>::zeros(vec![3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn uids_are_unique() {
        let a = Tensor::<f32>::zeros(vec![1]);
        let b = Tensor::<f32>::zeros(vec![1]);
        assert_ne!(a.uid(), b.uid());
    }
}
