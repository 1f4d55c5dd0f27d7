//! Seeded parameter initialization.
//!
//! Conv and FC weights use Kaiming-uniform with ReLU gain (fan-in); biases
//! start at zero. All draws come from a caller-provided ChaCha stream so a
//! fixed seed reproduces the model bit-for-bit.

use alloc::vec;
use alloc::vec::Vec;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::param::{ConvParam, LinearParam, Param};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Deterministic RNG used everywhere in this crate.
pub type SeedRng = ChaCha8Rng;

/// Kaiming-uniform bound for ReLU-family fan-in: `sqrt(6 / fan_in)`.
fn kaiming_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn uniform_tensor<T: Scalar>(rng: &mut SeedRng, shape: &[usize], bound: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(T::of(rng.gen_range(-bound..bound)));
    }
    Tensor::new(shape, data).expect("shape/product consistent")
}

pub fn conv_param<T: Scalar>(
    rng: &mut SeedRng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> ConvParam<T> {
    let bound = kaiming_bound(cin * k * k);
    ConvParam {
        weight: Param::new(
            &alloc::format!("{name}.weight"),
            uniform_tensor(rng, &[cout, cin, k, k], bound),
            true,
        ),
        bias: Param::new(
            &alloc::format!("{name}.bias"),
            Tensor::zeros(&[cout]),
            false,
        ),
        stride,
        padding,
    }
}

pub fn linear_param<T: Scalar>(
    rng: &mut SeedRng,
    name: &str,
    dout: usize,
    din: usize,
) -> LinearParam<T> {
    let bound = kaiming_bound(din);
    LinearParam {
        weight: Param::new(
            &alloc::format!("{name}.weight"),
            uniform_tensor(rng, &[dout, din], bound),
            true,
        ),
        bias: Param::new(
            &alloc::format!("{name}.bias"),
            Tensor::zeros(&[dout]),
            false,
        ),
    }
}

/// Learnable scalar parameter (shape `[1]`), excluded from weight decay.
pub fn scalar_param<T: Scalar>(name: &str, value: f64) -> Param<T> {
    Param::new(name, Tensor::new(&[1], vec![T::of(value)]).unwrap(), false)
}

/// Uniform tensor in `[lo, hi)`; used for randomized tests and inputs.
pub fn random_tensor<T: Scalar>(rng: &mut SeedRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(T::of(rng.gen_range(lo..hi)));
    }
    Tensor::new(shape, data).expect("shape/product consistent")
}
