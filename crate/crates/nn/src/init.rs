//! Weight initialization. Draw order is fixed (row-major over the flat
//! buffer), so a given seed always produces the same tensors.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// He/Kaiming normal: std = sqrt(2 / fan_in).
pub fn kaiming_normal<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<f64> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    normal(shape, 0.0, std, rng)
}

pub fn normal<R: Rng>(shape: &[usize], mean: f64, std: f64, rng: &mut R) -> ArrayD<f64> {
    let dist = Normal::new(mean, std).expect("normal: bad std");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> ArrayD<f64> {
    let dist = Uniform::new(lo, hi);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(shape), 1.0)
}
