//! Layer parameter records and their tape bindings.

pub mod layout;

use crate::error::Result;
use crate::tensor::{BatchNormMode, BatchStats, Fill, Scalar, Tape, Tensor, Var};

pub use layout::{FeatureGroup, GroupLayout};

/// Whether batch norm uses batch statistics or running averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// He-style initialization: normal with `std = sqrt(2 / fan_in)`.
pub fn fan_in_normal<T: Scalar>(shape: &[usize], fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    Tensor::new(
        shape,
        Fill::Normal {
            seed,
            mean: 0.0,
            std: (2.0 / fan_in as f64).sqrt(),
        },
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer<T> {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, seed: u64) -> Result<Self> {
        Ok(ConvLayer {
            weight: fan_in_normal(&[c_out, c_in, k, k], c_in * k * k, seed)?,
            bias: Tensor::zeros(&[c_out]),
            stride,
            pad,
        })
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Convolution of `x` with bound parameters.
pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, layer: &ConvLayer<T>, w: Var, b: Var) -> Result<Var> {
    tape.conv2d(x, w, Some(b), layer.stride, layer.pad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormLayer<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], T::one()),
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * *s;
        }
        for (r, s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * *s;
        }
    }
}

/// Batch normalization with bound `gamma`/`beta`. Train mode returns the
/// batch statistics; the caller folds them into the running averages.
pub fn batchnorm2d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &BatchNormLayer<T>,
    gamma: Var,
    beta: Var,
    mode: Mode,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let mode = match mode {
        Mode::Train => BatchNormMode::Train { eps: layer.eps },
        Mode::Eval => BatchNormMode::Eval {
            running_mean: layer.running_mean.data(),
            running_var: layer.running_var.data(),
            eps: layer.eps,
        },
    };
    tape.batch_norm(x, gamma, beta, mode)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearLayer<T> {
    /// `[out, in]`
    pub weight: Tensor<T>,
    /// `[out]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(inputs: usize, outputs: usize, seed: u64) -> Result<Self> {
        Ok(LinearLayer {
            weight: fan_in_normal(&[outputs, inputs], inputs, seed)?,
            bias: Tensor::zeros(&[outputs]),
        })
    }
}

/// Group pooling `G(h)`: pixel-wise maximum over each feature group.
pub fn group_pool<T: Scalar>(tape: &mut Tape<T>, h: Var, layout: &GroupLayout) -> Result<Var> {
    tape.group_pool(h, &layout.blocks())
}
