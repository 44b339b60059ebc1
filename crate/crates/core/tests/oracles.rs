//! Operators checked against explicitly assembled dense matrices on 8x8 grids.

mod common;

use common::dense;

const TOL: f64 = 1e-8;

#[test]
fn sense_forward_matches_dense_matrix() {
    for seed in 0..3 {
        let e = dense::sense_forward_error(seed);
        assert!(e < TOL, "{e:e}");
    }
}

#[test]
fn jvc_tikhonov_real_matches_dense_least_squares() {
    for seed in 0..3 {
        let e = dense::jvc_real_error(seed);
        assert!(e < TOL, "{e:e}");
    }
}

#[test]
fn jvc_tikhonov_complex_matches_dense_least_squares() {
    for seed in 0..3 {
        let e = dense::jvc_complex_error(seed);
        assert!(e < TOL, "{e:e}");
    }
}

#[test]
fn lowrank_project_matches_dense_svd() {
    for seed in 0..3 {
        let e = dense::lowrank_error(seed);
        assert!(e < TOL, "{e:e}");
    }
}
