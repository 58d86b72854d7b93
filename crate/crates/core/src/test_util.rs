//! Helpers shared by the unit tests.

use alloc::vec::Vec;

use crate::error::Result;
use crate::params::{ParamBuilder, ParamStore};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Build a module into a fresh store seeded by `seed`.
pub fn build<T>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_>) -> Result<T>) -> (ParamStore, T) {
    let mut store = ParamStore::new();
    let mut rng = RngStream::new(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng)).unwrap();
    (store, m)
}

/// Uniform values in `[-1, 1]`.
pub fn random(rng: &mut RngStream, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

/// Overwrite every parameter whose name ends with `suffix` with random values.
pub fn randomize(store: &mut ParamStore, suffix: &str, seed: u64) {
    let mut rng = RngStream::new(seed);
    for p in store.iter_mut().filter(|p| p.name.ends_with(suffix)) {
        for v in p.value.data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
}

/// Zero every parameter whose name starts with `prefix`.
pub fn zero_prefix(store: &mut ParamStore, prefix: &str) {
    for p in store.iter_mut().filter(|p| p.name.starts_with(prefix)) {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Plain `a · b` for row-major `[m, k] x [k, n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = alloc::vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for t in 0..k {
                y[i * n + j] += a[i * k + t] * b[t * n + j];
            }
        }
    }
    y
}
