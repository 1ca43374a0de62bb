//! Differentiable layers of the backbone and their parameter containers.

pub mod activation;
pub mod conv;
mod kernels;
pub mod norm;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use conv::ConvGeometry;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Weights of a convolution.
///
/// Regular convolutions store `(C_out, C_in, k, k, k)`; the stride-2
/// transposed convolution stores `(C_in, C_out, 2, 2, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub geometry: ConvGeometry,
    pub transposed: bool,
}

impl<T: Real> ConvParams<T> {
    /// He-normal weights (std `sqrt(2 / fan_in)`), zero bias.
    pub fn he_normal(c_out: usize, c_in: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let [kd, kh, kw] = geometry.kernel;
        let fan_in = c_in * geometry.kernel_volume();
        ConvParams {
            weight: he_tensor(Shape::new(c_out, c_in, kd, kh, kw), fan_in, rng),
            bias: Tensor::zeros(Shape::new(1, c_out, 1, 1, 1)),
            geometry,
            transposed: false,
        }
    }

    /// Kernel-2 stride-2 upsampling weights. Every output voxel sees exactly
    /// one tap per input channel, so `fan_in = c_in`.
    pub fn he_normal_transposed(c_in: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        ConvParams {
            weight: he_tensor(Shape::new(c_in, c_out, 2, 2, 2), c_in, rng),
            bias: Tensor::zeros(Shape::new(1, c_out, 1, 1, 1)),
            geometry: ConvGeometry {
                kernel: [2; 3],
                stride: [2; 3],
                padding: [0; 3],
            },
            transposed: true,
        }
    }

    pub fn in_channels(&self) -> usize {
        let s = self.weight.shape().0;
        if self.transposed {
            s[0]
        } else {
            s[1]
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.shape().channels()
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn cast<U: Real>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            geometry: self.geometry,
            transposed: self.transposed,
        }
    }
}

fn he_tensor<T: Real>(shape: Shape, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..shape.numel())
        .map(|_| T::of(normal.sample(rng)))
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

/// Seeded standalone initializer for a regular convolution.
pub fn init_conv<T: Real>(c_out: usize, c_in: usize, geometry: ConvGeometry, seed: u64) -> ConvParams<T> {
    ConvParams::he_normal(c_out, c_in, geometry, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Real> InstanceNormParams<T> {
    /// `gamma = 1`, `beta = 0`.
    pub fn new(channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1, 1);
        InstanceNormParams {
            gamma: Tensor::ones(s),
            beta: Tensor::zeros(s),
            eps: INSTANCE_NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.shape().channels()
    }

    pub fn cast<U: Real>(&self) -> InstanceNormParams<U> {
        InstanceNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            eps: self.eps,
        }
    }
}

/// Leaf handles of one convolution's parameters on a tape.
#[derive(Clone, Copy, Debug)]
pub struct BoundConv {
    pub weight: Var,
    pub bias: Var,
    pub geometry: ConvGeometry,
    pub transposed: bool,
}

impl BoundConv {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.transposed {
            tape.conv_transpose3d(x, self.weight, self.bias)
        } else {
            tape.conv3d(x, self.weight, self.bias, self.geometry)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundNorm {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl BoundNorm {
    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        tape.instance_norm(x, self.gamma, self.beta, self.eps)
    }
}
