//! Parameterized layers built on the tape ops.
//!
//! Layers own their parameters as [`Tensor`] values and bind them to a tape
//! at each forward pass. Batch-norm layers do not mutate themselves during
//! forward; train-mode batch statistics are pushed into a [`BnUpdates`] sink
//! that the training loop applies afterwards, which keeps eval-mode forward
//! usable through a shared reference.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;
use crate::rng::Rng;

/// One train-mode batch-norm call's statistics: the owning layer's uid, how
/// many elements each channel was reduced over, and the per-channel batch
/// mean and variance.
#[derive(Debug, Clone)]
pub struct BnUpdate<T: Scalar> {
    pub uid: u64,
    pub count: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch statistics collected during a train-mode forward pass.
#[derive(Debug, Default)]
pub struct BnUpdates<T: Scalar> {
    updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> BnUpdates<T> {
    pub fn new() -> Self {
        BnUpdates {
            updates: Vec::new(),
        }
    }

    pub fn push(&mut self, uid: u64, count: usize, mean: Vec<T>, var: Vec<T>) {
        self.updates.push(BnUpdate {
            uid,
            count,
            mean,
            var,
        });
    }

    pub fn entries(&self) -> &[BnUpdate<T>] {
        &self.updates
    }

    pub fn drain(&mut self) -> impl Iterator<Item = BnUpdate<T>> + '_ {
        self.updates.drain(..)
    }

    pub fn is_empty(&self) -> bool {
        self.updates.is_empty()
    }
}

/// Fully connected layer: y = x W + b, weight stored [in x out].
#[derive(Debug, Clone)]
pub struct Affine<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        Affine {
            weight: Tensor::fan_in_uniform(vec![in_dim, out_dim], in_dim, rng).requires_grad(true),
            bias: Tensor::zeros(vec![out_dim]).requires_grad(true),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{prefix}.weight"), &self.weight),
            (format!("{prefix}.bias"), &self.bias),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{prefix}.weight"), &mut self.weight),
            (format!("{prefix}.bias"), &mut self.bias),
        ]
    }
}

/// Bias-free 2d convolution layer (normalization supplies the shift).
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub kernels: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            kernels: Tensor::he_normal(vec![c_out, c_in, kernel, kernel], fan_in, rng)
                .requires_grad(true),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let k = tape.param(&self.kernels);
        tape.conv2d(x, k, self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.kernels]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.kernels]
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![(format!("{prefix}.kernels"), &self.kernels)]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        vec![(format!("{prefix}.kernels"), &mut self.kernels)]
    }
}

/// Batch normalization with learned scale/shift and running statistics.
/// Works on [B x D] rows or per-channel on [B,C,H,W] maps.
#[derive(Debug, Clone)]
pub struct BatchNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: T,
    pub momentum: T,
    spatial: bool,
}

impl<T: Scalar> BatchNorm<T> {
    fn build(dim: usize, spatial: bool) -> Self {
        BatchNorm {
            gamma: Tensor::full(vec![dim], T::ONE).requires_grad(true),
            beta: Tensor::zeros(vec![dim]).requires_grad(true),
            running_mean: Tensor::zeros(vec![dim]),
            running_var: Tensor::full(vec![dim], T::ONE),
            eps: T::from_f64(1e-5),
            momentum: T::from_f64(0.1),
            spatial,
        }
    }

    /// Norm over the rows of an [B x D] matrix.
    pub fn new(dim: usize) -> Self {
        Self::build(dim, false)
    }

    /// Per-channel norm of a [B,C,H,W] map.
    pub fn new_2d(channels: usize) -> Self {
        Self::build(channels, true)
    }

    /// Identity of this layer inside a [`BnUpdates`] sink.
    pub fn uid(&self) -> u64 {
        self.gamma.uid()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        sink: &mut BnUpdates<T>,
    ) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        let count = match xs.as_slice() {
            [rows, _] => *rows,
            [b, _, h, w] => b * h * w,
            _ => 0,
        };
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let (y, mean, var) = if self.spatial {
            tape.batch_norm2d(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
                mode,
            )?
        } else {
            tape.batch_norm(
                x,
                gamma,
                beta,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
                mode,
            )?
        };
        if mode == Mode::Train {
            sink.push(self.uid(), count, mean, var);
        }
        Ok(y)
    }

    /// Normalizes an [N x D] input with running population statistics in
    /// every mode, tracking them while training. Made for norms whose
    /// reduction axis holds a handful of correlated rows from one sample:
    /// normalizing with the sample's own statistics would subtract exactly
    /// the per-sample mean that carries the signal, and the average of
    /// per-sample variances misses the across-sample spread entirely. The
    /// moving averages therefore track the first and second moment
    /// (`running_var` holds E[x^2] for tracked layers) and the divisor is
    /// the population variance E[x^2] - E[x]^2.
    pub fn forward_tracked(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        mode: Mode,
        sink: &mut BnUpdates<T>,
    ) -> Result<Var> {
        let xs = tape.shape(x).to_vec();
        let (rows, cols) = match xs.as_slice() {
            [r, c] => (*r, *c),
            _ => {
                return Err(Error::config(
                    "batch_norm",
                    format!("forward_tracked expects [N x D], got {xs:?}"),
                ))
            }
        };
        if mode == Mode::Train {
            if rows < 2 {
                return Err(Error::config(
                    "batch_norm",
                    "train mode requires at least 2 rows (batch of 1 has undefined variance)",
                ));
            }
            let v = tape.value(x);
            let norm = T::from_usize(rows);
            let mut mean = vec![T::ZERO; cols];
            let mut second = vec![T::ZERO; cols];
            for row in v.chunks_exact(cols) {
                for ((m, s), value) in mean.iter_mut().zip(second.iter_mut()).zip(row) {
                    *m += *value;
                    *s += *value * *value;
                }
            }
            for (m, s) in mean.iter_mut().zip(second.iter_mut()) {
                *m /= norm;
                *s /= norm;
            }
            sink.push(self.uid(), rows, mean, second);
        }
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        let pop_var: Vec<T> = self
            .running_var
            .data()
            .iter()
            .zip(self.running_mean.data())
            .map(|(sq, m)| (*sq - *m * *m).maximum(T::ZERO))
            .collect();
        let (y, _, _) = tape.batch_norm(
            x,
            gamma,
            beta,
            self.running_mean.data(),
            &pop_var,
            self.eps,
            Mode::Eval,
        )?;
        Ok(y)
    }

    /// Exponential moving average update from one batch's statistics.
    pub fn apply_update(&mut self, update: &BnUpdate<T>) {
        let m = self.momentum;
        let keep = T::ONE - m;
        for (r, b) in self.running_mean.data_mut().iter_mut().zip(&update.mean) {
            *r = keep * *r + m * *b;
        }
        for (r, b) in self.running_var.data_mut().iter_mut().zip(&update.var) {
            *r = keep * *r + m * *b;
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }

    /// Parameters plus running-stat buffers, for checkpointing.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        vec![
            (format!("{prefix}.gamma"), &self.gamma),
            (format!("{prefix}.beta"), &self.beta),
            (format!("{prefix}.running_mean"), &self.running_mean),
            (format!("{prefix}.running_var"), &self.running_var),
        ]
    }

    pub fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        vec![
            (format!("{prefix}.gamma"), &mut self.gamma),
            (format!("{prefix}.beta"), &mut self.beta),
            (format!("{prefix}.running_mean"), &mut self.running_mean),
            (format!("{prefix}.running_var"), &mut self.running_var),
        ]
    }
}

/// Applies collected batch statistics to the matching layers. Returns an
/// error if an update refers to a layer that is not in `layers`.
pub fn apply_bn_updates<T: Scalar>(
    sink: &mut BnUpdates<T>,
    layers: &mut [&mut BatchNorm<T>],
) -> Result<()> {
    for update in sink.drain() {
        let layer = layers
            .iter_mut()
            .find(|l| l.uid() == update.uid)
            .ok_or_else(|| {
                Error::config("apply_bn_updates", format!("unknown bn layer {}", update.uid))
            })?;
        layer.apply_update(&update);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_forward_matches_manual() {
        let mut rng = Rng::seed(1);
        let mut layer = Affine::<f64>::new(2, 3, &mut rng);
        layer.weight.set_data(&[1., 2., 3., 4., 5., 6.]).unwrap();
        layer.bias.set_data(&[0.1, 0.2, 0.3]).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
        let y = layer.forward(&mut tape, x).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 5.1).abs() < 1e-12);
        assert!((v[1] - 7.2).abs() < 1e-12);
        assert!((v[2] - 9.3).abs() < 1e-12);
    }

    #[test]
    fn bn_running_stats_move_toward_batch_stats() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.apply_update(&BnUpdate {
            uid: bn.uid(),
            count: 4,
            mean: vec![10.0, -10.0],
            var: vec![4.0, 9.0],
        });
        assert!((bn.running_mean.data()[0] - 1.0).abs() < 1e-12);
        assert!((bn.running_mean.data()[1] + 1.0).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.4)).abs() < 1e-12);
        assert!((bn.running_var.data()[1] - (0.9 + 0.9)).abs() < 1e-12);
    }

    #[test]
    fn bn_eval_uses_running_stats_not_batch() {
        let bn = BatchNorm::<f64>::new(1);
        let mut tape = Tape::new();
        let mut sink = BnUpdates::new();
        let x = tape.constant(vec![2, 1], vec![3.0, 5.0]).unwrap();
        let y = bn.forward(&mut tape, x, Mode::Eval, &mut sink).unwrap();
        // running mean 0, var 1: output is x (up to eps)
        let v = tape.value(y);
        assert!((v[0] - 3.0).abs() < 1e-4);
        assert!((v[1] - 5.0).abs() < 1e-4);
        assert!(sink.is_empty());
    }
}
