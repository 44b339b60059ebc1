//! Dense-matrix oracles on 8x8 grids.

use super::*;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Array4};
use neatr_core::encoding::{make_mask, sense_forward, CoilMaps, KSpaceShotSet, SamplingMask};
use neatr_core::hankel::{lowrank_project, RankBudget, SvdMethod};
use neatr_core::jvc::{solve_jvc, JvcConfig, RegKind};
use neatr_core::tensor::{mirror_index, C64};
use rand::Rng;

const N: usize = 8;

/// Rows of `diag(keep) F diag(s)` for one coil, zero rows where unsampled.
fn encoding_rows(s: &Array2<C64>, keep: &Array2<bool>) -> DMatrix<C64> {
    let f = dft_2d(N, N);
    DMatrix::from_fn(N * N, N * N, |k, j| {
        let (ki, kj) = (k / N, k % N);
        if keep[[ki, kj]] {
            f[(k, j)] * s[[j / N, j % N]]
        } else {
            C64::new(0.0, 0.0)
        }
    })
}

/// Virtual-coil rows for a real unknown: entry `k` is the conjugate of the
/// primary row at `-k`.
fn mirrored_rows(primary: &DMatrix<C64>) -> DMatrix<C64> {
    DMatrix::from_fn(N * N, N * N, |k, j| {
        let (ki, kj) = (k / N, k % N);
        let src = mirror_index(ki, N) * N + mirror_index(kj, N);
        primary[(src, j)].conj()
    })
}

fn mirrored_data(d: &DVector<C64>) -> DVector<C64> {
    DVector::from_fn(N * N, |k, _| {
        let (ki, kj) = (k / N, k % N);
        d[mirror_index(ki, N) * N + mirror_index(kj, N)].conj()
    })
}

fn vstack(blocks: &[DMatrix<C64>]) -> DMatrix<C64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, blocks[0].ncols());
    let mut r = 0;
    for b in blocks {
        out.rows_mut(r, b.nrows()).copy_from(b);
        r += b.nrows();
    }
    out
}

fn vcat(parts: &[DVector<C64>]) -> DVector<C64> {
    DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().cloned()))
}

/// Worst deviation of `sense_forward` from `diag(mask) F diag(C_c)`.
pub fn sense_forward_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for (r, mb, delta) in [(1, 1, 0), (2, 1, 1), (4, 2, 1), (2, 2, 0)] {
        let coils = random_coils(2, N, N, &mut rng);
        let mask = make_mask(0, N, N, r, mb, delta).unwrap();
        let x = random_image(N, N, &mut rng);
        let y = sense_forward(&x, &coils, &mask).unwrap();
        for c in 0..2 {
            let s = coils.maps().index_axis(ndarray::Axis(0), c).to_owned();
            let e = encoding_rows(&s, &mask.keep);
            let dense = &e * vec_of(&x);
            let got = y.index_axis(ndarray::Axis(0), c);
            worst = worst.max(max_abs_diff(got.iter(), dense.iter()));
        }
    }
    worst
}

struct JvcInstance {
    coils: CoilMaps,
    masks: Vec<SamplingMask>,
    phases: Vec<Array2<f64>>,
    data: KSpaceShotSet,
}

fn jvc_instance(seed: u64) -> JvcInstance {
    let mut rng = rng(seed);
    let coils = random_coils(2, N, N, &mut rng);
    let masks: Vec<SamplingMask> = (0..2).map(|t| make_mask(t, N, N, 2, 1, t).unwrap()).collect();
    let phases: Vec<Array2<f64>> = (0..2)
        .map(|_| Array2::from_shape_fn((N, N), |_| rng.random_range(-3.0..3.0)))
        .collect();
    let mut d = Array4::<C64>::zeros((2, 2, N, N));
    for t in 0..2 {
        for c in 0..2 {
            for i in 0..N {
                for j in 0..N {
                    if masks[t].keep[[i, j]] {
                        d[[t, c, i, j]] = C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                    }
                }
            }
        }
    }
    let data = KSpaceShotSet::new(d, masks.clone()).unwrap();
    JvcInstance { coils, masks, phases, data }
}

/// Encoding rows and data of every shot and coil, optionally with the
/// virtual-coil blocks.
fn dense_system(inst: &JvcInstance, virtual_coils: bool) -> (DMatrix<C64>, DVector<C64>) {
    let mut rows = Vec::new();
    let mut data = Vec::new();
    for t in 0..2 {
        let d_t: Array3<C64> = inst.data.shot(t);
        for c in 0..2 {
            let s = Array2::from_shape_fn((N, N), |(i, j)| {
                inst.coils.maps()[[c, i, j]] * C64::from_polar(1.0, inst.phases[t][[i, j]])
            });
            let e = encoding_rows(&s, &inst.masks[t].keep);
            let dv = vec_of(&d_t.index_axis(ndarray::Axis(0), c).to_owned());
            if virtual_coils {
                rows.push(mirrored_rows(&e));
                data.push(mirrored_data(&dv));
            }
            rows.push(e);
            data.push(dv);
        }
    }
    (vstack(&rows), vcat(&data))
}

/// Real-unknown Tikhonov JVC with virtual coils against the real-stacked
/// normal equations.
pub fn jvc_real_error(seed: u64) -> f64 {
    let inst = jvc_instance(seed);
    let beta = 0.05;
    let (a, d) = dense_system(&inst, true);
    let ah = a.adjoint();
    let g = (&ah * &a).map(|z| z.re) + DMatrix::identity(N * N, N * N) * beta;
    let rhs = (&ah * &d).map(|z| z.re);
    let oracle = g.lu().solve(&rhs).unwrap();

    let cfg = JvcConfig {
        beta,
        reg_kind: RegKind::Tikhonov,
        cg_iters: 500,
        cg_tol: 1e-14,
        real_constraint: true,
        virtual_coils: true,
        ..Default::default()
    };
    let out = solve_jvc(&Array2::zeros((N, N)), &inst.phases, &inst.data, &inst.coils, &cfg).unwrap();
    out.image.iter().zip(oracle.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

/// Complex-unknown Tikhonov JVC without virtual coils.
pub fn jvc_complex_error(seed: u64) -> f64 {
    let inst = jvc_instance(seed);
    let beta = 0.02;
    let (a, d) = dense_system(&inst, false);
    let ah = a.adjoint();
    let g = &ah * &a + DMatrix::identity(N * N, N * N) * C64::new(beta, 0.0);
    let oracle = g.lu().solve(&(&ah * &d)).unwrap();

    let cfg = JvcConfig {
        beta,
        reg_kind: RegKind::Tikhonov,
        cg_iters: 500,
        cg_tol: 1e-14,
        real_constraint: false,
        virtual_coils: false,
        ..Default::default()
    };
    let out = solve_jvc(&Array2::zeros((N, N)), &inst.phases, &inst.data, &inst.coils, &cfg).unwrap();
    max_abs_diff(out.complex.iter(), oracle.iter())
}

/// Valid-window lift built by direct enumeration. Row and column order differ
/// from the library's, which a rank truncation does not notice.
fn lift(x: &Array3<C64>, r: usize) -> (DMatrix<C64>, Vec<Vec<(usize, usize, usize)>>) {
    let (s, n0, n1) = x.dim();
    let mut rows = Vec::new();
    let mut index = Vec::new();
    for q in 0..=n1 - r {
        for p in 0..=n0 - r {
            let mut row = Vec::new();
            let mut idx = Vec::new();
            for t in (0..s).rev() {
                for b in 0..r {
                    for a in 0..r {
                        row.push(x[[t, p + a, q + b]]);
                        idx.push((t, p + a, q + b));
                    }
                }
            }
            rows.push(row);
            index.push(idx);
        }
    }
    let cols = rows[0].len();
    (DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]), index)
}

fn svd_oracle(x: &Array3<C64>, r: usize, k: usize) -> Array3<C64> {
    let (h, index) = lift(x, r);
    let (rows, cols) = h.shape();
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut hk = DMatrix::<C64>::zeros(rows, cols);
    for &i in order.iter().take(k) {
        hk += u.column(i) * vt.row(i) * C64::new(svd.singular_values[i], 0.0);
    }
    let mut sum = Array3::<C64>::zeros(x.dim());
    let mut count = Array3::<f64>::zeros(x.dim());
    for (i, idx) in index.iter().enumerate() {
        for (j, &(t, a, b)) in idx.iter().enumerate() {
            sum[[t, a, b]] += hk[(i, j)];
            count[[t, a, b]] += 1.0;
        }
    }
    ndarray::Zip::from(&mut sum).and(&count).for_each(|z, &c| *z /= c);
    sum
}

/// Every SVD path of `lowrank_project` against a truncated dense SVD of an
/// independently enumerated lift.
pub fn lowrank_error(seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    for (shots, r, n_eff) in [(2, 3, 1.0), (2, 4, 0.75), (3, 3, 1.5), (1, 5, 0.3)] {
        let x = random_stack(shots, N, N, &mut rng);
        let budget = RankBudget::new(r, n_eff).unwrap();
        let k = neatr_core::hankel::rank_from_neff(r, n_eff);
        let oracle = svd_oracle(&x, r, k);
        for method in [SvdMethod::Dense, SvdMethod::Gram, SvdMethod::Auto] {
            let got = lowrank_project(&x, &budget, method).unwrap();
            worst = worst.max(max_abs_diff(got.iter(), oracle.iter()));
        }
    }
    worst
}
