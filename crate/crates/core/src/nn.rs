//! Parameterized layers shared by the representation, flow and weight heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Bound, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

pub const LEAK: f64 = 0.1;

/// Uniform `[-b, b]` with `b = sqrt(6 / ((1 + a^2) fan_in))`.
pub fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / ((1.0 + LEAK * LEAK) * fan_in as f64)).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

/// Uniform `[-b, b]` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Kaiming,
    Zero,
}

/// Square-kernel 2D convolution with a per-channel bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let shape = [c_out, c_in, kernel, kernel];
        let w = match init {
            Init::Kaiming => kaiming_uniform(&shape, c_in * kernel * kernel, rng),
            Init::Zero => Tensor::zeros(&shape),
        };
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out, 1, 1]))?,
            stride,
        })
    }

    pub fn num_params(c_in: usize, c_out: usize, kernel: usize) -> usize {
        c_out * c_in * kernel * kernel + c_out
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = g.conv2d(x, p[self.weight], self.stride)?;
        g.add(y, p[self.bias])
    }

    pub fn forward_leaky<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let y = self.forward(g, p, x)?;
        Ok(g.leaky_relu(y, T::lit(LEAK)))
    }
}
