//! Helpers shared by the integration tests.
#![allow(dead_code)]

use cchmm::diffcore::Tensor;
use cchmm::model::ModelParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

pub fn zero_all(params: &mut ModelParams) {
    for t in params.tensors_mut() {
        *t = Tensor::zeros(t.shape());
    }
}

pub fn set(params: &mut ModelParams, name: &str, value: Tensor) {
    let id = params.id_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
    assert_eq!(params.get(id).shape(), value.shape(), "{name}");
    *params.get_mut(id) = value;
}

pub fn fill(params: &mut ModelParams, name: &str, v: f64) {
    let shape = params.by_name(name).unwrap_or_else(|| panic!("no parameter {name}")).shape().to_vec();
    set(params, name, Tensor::full(&shape, v));
}

pub fn identity(params: &mut ModelParams, name: &str) {
    let d = params.by_name(name).unwrap().shape()[0];
    set(params, name, Tensor::eye(d));
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape());
    let diff = a.max_abs_diff(b);
    assert!(diff <= tol, "max abs diff {diff:e} > {tol:e}");
}
