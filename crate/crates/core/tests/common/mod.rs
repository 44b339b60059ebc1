//! Shared fixtures for the integration tests.
#![allow(dead_code)]

pub mod dense;
pub mod quant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3};
use neatr_core::encoding::CoilMaps;
use neatr_core::tensor::C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(n0: usize, n1: usize, rng: &mut ChaCha8Rng) -> Array2<C64> {
    Array2::from_shape_fn((n0, n1), |_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

pub fn random_stack(n: usize, n0: usize, n1: usize, rng: &mut ChaCha8Rng) -> Array3<C64> {
    Array3::from_shape_fn((n, n0, n1), |_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

pub fn random_coils(nc: usize, n0: usize, n1: usize, rng: &mut ChaCha8Rng) -> CoilMaps {
    let maps = Array3::from_shape_fn((nc, n0, n1), |_| C64::new(rng.random_range(0.2..1.0), rng.random_range(-0.6..0.6)));
    CoilMaps::new(maps).unwrap()
}

/// Centered unitary 1D DFT matrix.
pub fn dft_1d(n: usize) -> DMatrix<C64> {
    let c = (n / 2) as f64;
    let s = (n as f64).sqrt();
    DMatrix::from_fn(n, n, |k, j| {
        C64::from_polar(1.0 / s, -2.0 * std::f64::consts::PI * (k as f64 - c) * (j as f64 - c) / n as f64)
    })
}

/// Centered unitary 2D DFT acting on row-major vectorized images.
pub fn dft_2d(n0: usize, n1: usize) -> DMatrix<C64> {
    dft_1d(n0).kronecker(&dft_1d(n1))
}

pub fn vec_of(a: &Array2<C64>) -> DVector<C64> {
    DVector::from_iterator(a.len(), a.iter().cloned())
}

pub fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a C64>, b: impl IntoIterator<Item = &'a C64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}
