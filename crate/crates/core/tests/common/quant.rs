//! Simulate-then-fit round trips.

use super::*;
use ndarray::Array2;
use neatr_core::dataset::Protocol;
use neatr_core::quantify::{fit_dti, fit_sage};
use neatr_core::simulate::{simulate_dataset, six_directions, synthesize_dwi, DiffusionModel, SimulationConfig, Tensor6};

pub struct SageCheck {
    /// worst relative error on the support
    pub t2: f64,
    pub t2s: f64,
    pub all_valid: bool,
}

pub fn sage_round_trip() -> SageCheck {
    let ds = simulate_dataset(&SimulationConfig {
        protocol: Protocol::Sage,
        n1: 32,
        n2: 32,
        ..Default::default()
    })
    .unwrap();
    let t = ds.truth.as_ref().unwrap();
    let sup = &t.support;
    let fit = fit_sage(&t.magnitude, &ds.manifest.tes, ds.manifest.te_se.unwrap(), sup).unwrap();
    let worst = |est: &Array2<f64>, truth: &Array2<f64>| {
        est.indexed_iter()
            .filter(|(idx, _)| sup[*idx])
            .map(|(idx, v)| ((v - truth[idx]) / truth[idx]).abs())
            .fold(0.0, f64::max)
    };
    SageCheck {
        t2: worst(&fit.t2, t.param("t2").unwrap()),
        t2s: worst(&fit.t2s, t.param("t2s").unwrap()),
        all_valid: fit.valid.iter().zip(sup).all(|(v, s)| !s || *v),
    }
}

pub struct DtiCheck {
    /// worst `|D_fit - D|` relative to `max |D|`
    pub tensor: f64,
    pub s0: f64,
    /// worst FA deviation from the invariant formula
    pub fa_oracle: f64,
    pub fa_in_range: bool,
    pub isotropic_fa: f64,
    pub isotropic_md: f64,
    pub rank_one_fa: f64,
}

/// FA from tensor invariants only: `sum lambda^2 = ||D||_F^2`, `MD = tr / 3`.
fn fa_from_invariants(d: &Tensor6) -> f64 {
    let fro = d[0] * d[0] + d[1] * d[1] + d[2] * d[2] + 2.0 * (d[3] * d[3] + d[4] * d[4] + d[5] * d[5]);
    let md = (d[0] + d[1] + d[2]) / 3.0;
    (1.5 * (fro - 3.0 * md * md) / fro).sqrt()
}

fn acquisition() -> (Vec<f64>, Vec<[f64; 3]>) {
    let mut bvals = vec![0.0];
    let mut bvecs = vec![[0.0, 0.0, 0.0]];
    for g in six_directions() {
        bvals.push(1000.0);
        bvecs.push(g);
    }
    // a second shell keeps the design well conditioned
    for g in six_directions() {
        bvals.push(2000.0);
        bvecs.push([g[0], -g[1], g[2]]);
    }
    (bvals, bvecs)
}

fn fit_tensors(tensors: Array2<Tensor6>, s0: Array2<f64>) -> neatr_core::quantify::DtiFit {
    let (bvals, bvecs) = acquisition();
    let model = DiffusionModel { tensors, bvals: bvals.clone(), bvecs: bvecs.clone() };
    let images = synthesize_dwi(&s0, &model).unwrap();
    let mask = Array2::from_elem(s0.dim(), true);
    fit_dti(&images, &bvals, &bvecs, &mask).unwrap()
}

pub fn dti_round_trip(seed: u64) -> DtiCheck {
    let mut rng = rng(seed);
    let (n0, n1) = (6, 7);
    let tensors = Array2::from_shape_fn((n0, n1), |_| {
        let l: [f64; 6] = std::array::from_fn(|_| rng.random_range(-0.04..0.04));
        let (a, b, c, d, e, f) = (l[0].abs() + 0.01, l[1].abs() + 0.01, l[2].abs() + 0.01, l[3], l[4], l[5]);
        [a * a, d * d + b * b, e * e + f * f + c * c, a * d, a * e, d * e + b * f]
    });
    let s0 = Array2::from_shape_fn((n0, n1), |_| rng.random_range(0.3..2.0));
    let fit = fit_tensors(tensors.clone(), s0.clone());
    let dmax = tensors.iter().flat_map(|d| d.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    let mut tensor = 0.0f64;
    let mut s0_err = 0.0f64;
    let mut fa_oracle = 0.0f64;
    for ((i, j), d) in tensors.indexed_iter() {
        for k in 0..6 {
            tensor = tensor.max((fit.tensor[[i, j, k]] - d[k]).abs() / dmax);
        }
        s0_err = s0_err.max((fit.s0[[i, j]] - s0[[i, j]]).abs() / s0[[i, j]]);
        fa_oracle = fa_oracle.max((fit.fa[[i, j]] - fa_from_invariants(d)).abs());
    }
    let fa_in_range = fit.fa.iter().all(|v| (0.0..=1.0).contains(v));

    let iso = fit_tensors(Array2::from_elem((2, 2), [1.1e-3, 1.1e-3, 1.1e-3, 0.0, 0.0, 0.0]), Array2::ones((2, 2)));
    // a vanishing transverse diffusivity keeps every signal positive
    let rank1 = fit_tensors(Array2::from_elem((2, 2), [1.5e-3, 0.0, 0.0, 0.0, 0.0, 0.0]), Array2::ones((2, 2)));
    DtiCheck {
        tensor,
        s0: s0_err,
        fa_oracle,
        fa_in_range,
        isotropic_fa: iso.fa.iter().fold(0.0, |m: f64, v| m.max(v.abs())),
        isotropic_md: iso.md.iter().fold(0.0, |m: f64, v| m.max((v - 1.1e-3).abs())),
        rank_one_fa: rank1.fa.iter().fold(0.0, |m: f64, v| m.max((v - 1.0).abs())),
    }
}
