//! Multishot solver sanity on simulated data.

use ndarray::{Array2, Array3, Axis};
use neatr_core::dataset::Dataset;
use neatr_core::hankel::RankBudget;
use neatr_core::mussels::{initial_guess, solve_mussels, solve_mussels_observed, solve_pocs_sense, InitialGuess, MusselsConfig};
use neatr_core::simulate::{shot_images, simulate_dataset, SimulationConfig};
use neatr_core::tensor::{fft2c, C64};

fn sim(n: usize, mb: usize, r: usize, shots: usize, noise: f64) -> Dataset {
    simulate_dataset(&SimulationConfig {
        n1: n,
        n2: n,
        mb,
        r_inplane: r,
        n_shots: shots,
        noise_std: noise,
        max_frames: Some(1),
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

fn truth_shots(ds: &Dataset) -> Array3<C64> {
    let t = ds.truth.as_ref().unwrap();
    let phases: Vec<Array2<f64>> = t.phases[0].outer_iter().map(|p| p.to_owned()).collect();
    shot_images(&t.magnitude[0], &phases)
}

#[test]
fn fully_sampled_noiseless_single_shot_is_exact() {
    let ds = sim(32, 1, 1, 1, 0.0);
    let cfg = MusselsConfig {
        budget: RankBudget { r: 5, n_eff: 1.0 },
        max_iter: 5,
        ..Default::default()
    };
    let out = solve_mussels(&ds.frames[0], &ds.coils, &cfg, None).unwrap();
    let truth = truth_shots(&ds);
    let sup = ds.coils.support();
    let err = out
        .images
        .indexed_iter()
        .filter(|((_, i, j), _)| sup[[*i, *j]])
        .map(|((t, i, j), z)| (z - truth[[t, i, j]]).norm())
        .fold(0.0, f64::max);
    assert!(err <= 1e-8, "max error {err:e}");
}

#[test]
fn full_rank_budget_is_shot_by_shot_sense() {
    let ds = sim(32, 2, 4, 2, 0.002);
    let d = &ds.frames[0];
    let x0 = initial_guess(d, &ds.coils, InitialGuess::ShotSense, 5).unwrap();
    let cfg = MusselsConfig {
        budget: RankBudget { r: 5, n_eff: 2.0 },
        max_iter: 12,
        rel_tol: 1e-12,
        use_fista: false,
        ..Default::default()
    };
    let mut a_iters = Vec::new();
    let a = solve_mussels_observed(d, &ds.coils, &cfg, Some(&x0), |v| a_iters.push(v.coil_images.clone())).unwrap();
    let mut b_iters = Vec::new();
    let b = solve_pocs_sense(d, &ds.coils, 12, 1e-12, Some(&x0), |v| b_iters.push(v.coil_images.clone())).unwrap();
    assert_eq!(a_iters.len(), b_iters.len());
    assert!(a_iters == b_iters);
    assert_eq!(a.log, b.log);
    assert_eq!(a.images, b.images);
}

#[test]
fn acquired_samples_are_kept_every_iteration() {
    let ds = sim(32, 2, 4, 2, 0.01);
    let d = &ds.frames[0];
    let cfg = MusselsConfig {
        max_iter: 8,
        rel_tol: 1e-12,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    let mut seen = 0;
    solve_mussels_observed(d, &ds.coils, &cfg, None, |v| {
        seen += 1;
        let data = d.shot(v.shot);
        let mask = &d.masks()[v.shot];
        for (c, img) in v.coil_images.outer_iter().enumerate() {
            let k = fft2c(&img.to_owned()).unwrap();
            for ((i, j), &keep) in mask.keep.indexed_iter() {
                if keep {
                    worst = worst.max((k[[i, j]] - data[[c, i, j]]).norm());
                }
            }
        }
    })
    .unwrap();
    assert_eq!(seen, 8 * d.n_shots());
    assert!(worst < 1e-10, "consistency error {worst:e}");
}

#[test]
fn low_rank_prior_beats_zero_filling() {
    let ds = sim(32, 2, 4, 2, 0.002);
    let d = &ds.frames[0];
    let truth = truth_shots(&ds);
    let sup = &ds.truth.as_ref().unwrap().support;
    let rmse = |x: &Array3<C64>| neatr_core::quantify::rmse_percent_complex(x, &truth, sup).unwrap();
    let zf = initial_guess(d, &ds.coils, InitialGuess::ZeroFilled, 0).unwrap();
    let out = solve_mussels(d, &ds.coils, &MusselsConfig::default(), Some(&zf)).unwrap();
    assert!(rmse(&out.images) < 0.5 * rmse(&zf));
    assert_eq!(out.images.len_of(Axis(0)), 2);
}
