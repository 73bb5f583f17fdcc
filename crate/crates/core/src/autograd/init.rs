//! Parameter initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Real, Tensor};

pub fn uniform<T: Real, R: Rng>(rng: &mut R, lo: f64, hi: f64, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(rng.gen_range(lo..hi))).collect();
    Tensor::new(shape, data).expect("sized from shape")
}

/// Glorot/Xavier uniform: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform<T: Real, R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, -a, a, shape)
}

pub fn normal<T: Real, R: Rng>(rng: &mut R, std: f64, shape: &[usize]) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64c(dist.sample(rng))).collect();
    Tensor::new(shape, data).expect("sized from shape")
}
