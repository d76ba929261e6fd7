//! Parameter initialization helpers.

use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::Arr;

/// Truncated normal init: samples are redrawn until they fall within two
/// standard deviations of zero.
pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Arr {
    let dist = Normal::new(0.0, std).expect("std must be finite and positive");
    Arr::from_shape_fn(IxDyn(shape), |_| loop {
        let x = dist.sample(rng);
        if x.abs() <= 2.0 * std {
            break x;
        }
    })
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::ones(IxDyn(shape))
}
