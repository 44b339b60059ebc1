use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use neatr_core::hankel::{lowrank_project, RankBudget, SvdMethod};
use neatr_core::mussels::{initial_guess, solve_mussels, InitialGuess, MusselsConfig};
use neatr_core::simulate::{simulate_dataset, SimulationConfig};
use neatr_core::tensor::{fft2c, to_complex};

fn operators(c: &mut Criterion) {
    let ds = simulate_dataset(&SimulationConfig {
        max_frames: Some(1),
        ..Default::default()
    })
    .expect("simulate");
    let d = &ds.frames[0];
    let truth = ds.truth.as_ref().expect("truth");
    let img = to_complex(&truth.magnitude[0]);
    let x0 = initial_guess(d, &ds.coils, InitialGuess::JointSense, 20).expect("initial guess");

    c.bench_function("fft2c 128x64", |b| b.iter(|| fft2c(black_box(&img)).unwrap()));

    let budget = RankBudget { r: 5, n_eff: 1.0 };
    c.bench_function("lowrank_project 2 shots r=5", |b| {
        b.iter(|| lowrank_project(black_box(&x0), &budget, SvdMethod::Auto).unwrap())
    });

    let cfg = MusselsConfig {
        max_iter: 1,
        ..Default::default()
    };
    let mut group = c.benchmark_group("mussels");
    group.sample_size(10);
    group.bench_function("one iteration 8 coils", |b| {
        b.iter(|| solve_mussels(d, &ds.coils, &cfg, Some(black_box(&x0))).unwrap())
    });
    group.finish();
}

criterion_group!(benches, operators);
criterion_main!(benches);
