#![allow(dead_code)]

use fcn_core::rng::{rng_for, stream};
use fcn_core::{Dims, Tensor};
use rand::Rng;

pub fn rand_tensor(d: Dims, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, stream::INIT, 7);
    Tensor::from_vec(d, (0..d.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Integer-valued entries in `[-4, 4]`, so sums are exact.
pub fn int_tensor(d: Dims, seed: u64) -> Tensor {
    let mut rng = rng_for(seed, stream::INIT, 8);
    Tensor::from_vec(d, (0..d.len()).map(|_| rng.gen_range(-4..=4) as f64).collect()).unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.dims(), b.dims());
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}
