//! Parameter fits (SAGE T2/T2*, diffusion tensor) and error metrics.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Vector4};
use ndarray::{Array2, Array3, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::simulate::{sage_signal, Tensor6};
use crate::tensor::{wrap_angle, C64};

fn check_same(context: &str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(context, &[a.0, a.1], &[b.0, b.1]));
    }
    Ok(())
}

/// `100 * ||mask (recon - ref)|| / ||mask ref||` for real images.
pub fn rmse_percent(recon: &Array2<f64>, reference: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    check_same("rmse reference", recon.dim(), reference.dim())?;
    check_same("rmse mask", recon.dim(), mask.dim())?;
    let (mut num, mut den, mut any) = (0.0, 0.0, false);
    Zip::from(recon).and(reference).and(mask).for_each(|&a, &b, &m| {
        if m {
            any = true;
            num += (a - b) * (a - b);
            den += b * b;
        }
    });
    finish_rmse(num, den, any)
}

/// Complex variant for shot stacks; the mask applies to every shot.
pub fn rmse_percent_complex(recon: &Array3<C64>, reference: &Array3<C64>, mask: &Array2<bool>) -> Result<f64> {
    if recon.dim() != reference.dim() {
        let (a, b, c) = recon.dim();
        let (e, f, g) = reference.dim();
        return Err(Error::shape("rmse reference", &[a, b, c], &[e, f, g]));
    }
    let (_, n1, n2) = recon.dim();
    check_same("rmse mask", (n1, n2), mask.dim())?;
    let (mut num, mut den, mut any) = (0.0, 0.0, false);
    for (x, y) in recon.outer_iter().zip(reference.outer_iter()) {
        Zip::from(&x).and(&y).and(mask).for_each(|a, b, &m| {
            if m {
                any = true;
                num += (a - b).norm_sqr();
                den += b.norm_sqr();
            }
        });
    }
    finish_rmse(num, den, any)
}

/// Pooled over a series of frames (echoes or directions).
pub fn rmse_percent_series(recon: &[Array2<f64>], reference: &[Array2<f64>], mask: &Array2<bool>) -> Result<f64> {
    if recon.len() != reference.len() {
        return Err(Error::shape("rmse series", &[reference.len()], &[recon.len()]));
    }
    let (mut num, mut den, mut any) = (0.0, 0.0, false);
    for (a, b) in recon.iter().zip(reference) {
        check_same("rmse reference", a.dim(), b.dim())?;
        check_same("rmse mask", a.dim(), mask.dim())?;
        Zip::from(a).and(b).and(mask).for_each(|&x, &y, &m| {
            if m {
                any = true;
                num += (x - y) * (x - y);
                den += y * y;
            }
        });
    }
    finish_rmse(num, den, any)
}

fn finish_rmse(num: f64, den: f64, any: bool) -> Result<f64> {
    if !any {
        return Err(Error::InvalidParameter("rmse mask selects no voxels".into()));
    }
    if den == 0.0 {
        return Err(Error::InvalidParameter("rmse reference is zero on the mask".into()));
    }
    Ok(100.0 * (num / den).sqrt())
}

/// Median of `|wrap(est - truth - c)|` over the mask, where `c` is the
/// circular mean of the difference (phase is only defined up to a constant).
pub fn phase_error_median(est: &Array2<f64>, truth: &Array2<f64>, mask: &Array2<bool>) -> Result<f64> {
    check_same("phase error reference", est.dim(), truth.dim())?;
    check_same("phase error mask", est.dim(), mask.dim())?;
    let mut diffs = Vec::new();
    Zip::from(est).and(truth).and(mask).for_each(|&a, &b, &m| {
        if m {
            diffs.push(a - b);
        }
    });
    if diffs.is_empty() {
        return Err(Error::InvalidParameter("phase error mask selects no voxels".into()));
    }
    let mean: C64 = diffs.iter().map(|&d| C64::from_polar(1.0, d)).sum();
    let c = mean.arg();
    let mut err: Vec<f64> = diffs.iter().map(|&d| wrap_angle(d - c).abs()).collect();
    err.sort_by(f64::total_cmp);
    let n = err.len();
    Ok(if n % 2 == 1 { err[n / 2] } else { 0.5 * (err[n / 2 - 1] + err[n / 2]) })
}

/// Root-sum-of-squares of error images.
pub fn rsos_error(errors: &[Array2<f64>]) -> Result<Array2<f64>> {
    let first = errors
        .first()
        .ok_or_else(|| Error::InvalidParameter("rsos needs at least one image".into()))?;
    let mut acc = Array2::zeros(first.dim());
    for e in errors {
        check_same("rsos", first.dim(), e.dim())?;
        Zip::from(&mut acc).and(e).for_each(|a, &v| *a += v * v);
    }
    Ok(acc.mapv(f64::sqrt))
}

/// Otsu threshold of an image, as a foreground mask.
pub fn otsu_mask(image: &Array2<f64>) -> Array2<bool> {
    const BINS: usize = 256;
    let (lo, hi) = image
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return Array2::from_elem(image.dim(), false);
    }
    let bin = |v: f64| (((v - lo) / (hi - lo)) * (BINS as f64 - 1.0)).round() as usize;
    let mut hist = [0usize; BINS];
    for &v in image {
        hist[bin(v)] += 1;
    }
    let total = image.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let (mut w0, mut sum0, mut best, mut best_t) = (0.0, 0.0, -1.0, 0);
    for (t, &h) in hist.iter().enumerate() {
        w0 += h as f64;
        sum0 += t as f64 * h as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let (m0, m1) = (sum0 / w0, (sum_all - sum0) / w1);
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_t = t;
        }
    }
    image.mapv(|v| bin(v) > best_t)
}

#[derive(Debug, Clone)]
pub struct SageFit {
    /// ms
    pub t2: Array2<f64>,
    /// ms
    pub t2s: Array2<f64>,
    pub s0_i: Array2<f64>,
    pub s0_ii: Array2<f64>,
    pub valid: Array2<bool>,
    pub converged: Array2<bool>,
}

#[derive(Debug, Clone, Copy)]
struct SageVoxel {
    t2: f64,
    t2s: f64,
    s0_i: f64,
    s0_ii: f64,
    valid: bool,
    converged: bool,
}

// parameters p = (S0_I, S0_II, R2*, R2)
fn sage_model_jac(te: f64, te_se: f64, p: &Vector4<f64>) -> (f64, [f64; 4]) {
    let (a, b, r2s, r2) = (p[0], p[1], p[2], p[3]);
    if te < te_se / 2.0 {
        let e = (-te * r2s).exp();
        (a * e, [e, 0.0, -te * a * e, 0.0])
    } else {
        let e = (-te_se * (r2s - r2) - te * (2.0 * r2 - r2s)).exp();
        let s = b * e;
        (s, [0.0, e, (te - te_se) * s, (te_se - 2.0 * te) * s])
    }
}

fn linear_fit(x: &[f64], y: &[f64]) -> Option<(f64, f64)> {
    let n = x.len() as f64;
    if x.len() < 2 {
        return None;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

fn fit_sage_voxel(signal: &[f64], tes: &[f64], te_se: f64, max_iter: usize) -> SageVoxel {
    let invalid = SageVoxel {
        t2: f64::NAN,
        t2s: f64::NAN,
        s0_i: f64::NAN,
        s0_ii: f64::NAN,
        valid: false,
        converged: false,
    };
    let (pre, post): (Vec<usize>, Vec<usize>) = (0..tes.len()).partition(|&e| tes[e] < te_se / 2.0);
    if pre.len() < 2 || post.len() < 2 || signal.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return invalid;
    }
    // log-linear start: R2* from the gradient echoes, then the post-refocusing
    // slope is R2* - 2 R2
    let xs: Vec<f64> = pre.iter().map(|&e| tes[e]).collect();
    let ys: Vec<f64> = pre.iter().map(|&e| signal[e].ln()).collect();
    let Some((s1, c1)) = linear_fit(&xs, &ys) else { return invalid };
    let r2s = -s1;
    let xs: Vec<f64> = post.iter().map(|&e| tes[e]).collect();
    let ys: Vec<f64> = post.iter().map(|&e| signal[e].ln()).collect();
    let Some((s2, c2)) = linear_fit(&xs, &ys) else { return invalid };
    let r2 = (r2s - s2) / 2.0;
    let s0_ii = (c2 + te_se * (r2s - r2)).exp();
    let mut p = Vector4::new(c1.exp(), s0_ii, r2s, r2);

    let cost = |p: &Vector4<f64>| -> f64 {
        tes.iter()
            .zip(signal)
            .map(|(&te, &s)| {
                let r = sage_model_jac(te, te_se, p).0 - s;
                r * r
            })
            .sum()
    };
    let scale: f64 = signal.iter().map(|s| s * s).sum();
    let mut c = cost(&p);
    let mut lambda = 1e-3;
    let mut converged = c <= 1e-28 * scale;
    for _ in 0..max_iter {
        if converged {
            break;
        }
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for (&te, &s) in tes.iter().zip(signal) {
            let (f, j) = sage_model_jac(te, te_se, &p);
            let j = Vector4::from(j);
            jtj += j * j.transpose();
            jtr += j * (f - s);
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut a = jtj;
            for k in 0..4 {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-300);
            }
            let Some(delta) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let cand = p + delta;
            let cc = cost(&cand);
            if cc.is_finite() && cc <= c {
                let rel_step = delta.component_div(&p.map(|v| v.abs().max(1e-12))).amax();
                p = cand;
                let drop = c - cc;
                c = cc;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel_step < 1e-12 || drop <= 1e-15 * c.max(1e-300) || c <= 1e-28 * scale {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no downhill step left: at a (numerical) minimum
            converged = true;
            break;
        }
    }
    let (t2, t2s) = (1.0 / p[3], 1.0 / p[2]);
    let valid = t2 > 0.0 && t2s > 0.0 && t2.is_finite() && t2s.is_finite() && p[0] > 0.0 && p[1] > 0.0;
    SageVoxel {
        t2,
        t2s,
        s0_i: p[0],
        s0_ii: p[1],
        valid,
        converged,
    }
}

/// Voxelwise two-regime SAGE fit of magnitude echoes. Voxels that fail are
/// flagged, never fatal.
pub fn fit_sage(echoes: &[Array2<f64>], tes: &[f64], te_se: f64, mask: &Array2<bool>) -> Result<SageFit> {
    if echoes.len() < 4 {
        return Err(Error::InvalidParameter(format!("SAGE fit needs >= 4 echoes, got {}", echoes.len())));
    }
    if echoes.len() != tes.len() {
        return Err(Error::shape("SAGE echo times", &[echoes.len()], &[tes.len()]));
    }
    let grid = echoes[0].dim();
    for e in echoes {
        check_same("SAGE echo", grid, e.dim())?;
    }
    check_same("SAGE mask", grid, mask.dim())?;
    let voxels: Vec<SageVoxel> = (0..grid.0 * grid.1)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / grid.1, idx % grid.1);
            if !mask[[i, j]] {
                return SageVoxel {
                    t2: 0.0,
                    t2s: 0.0,
                    s0_i: 0.0,
                    s0_ii: 0.0,
                    valid: false,
                    converged: false,
                };
            }
            let s: Vec<f64> = echoes.iter().map(|e| e[[i, j]]).collect();
            fit_sage_voxel(&s, tes, te_se, 100)
        })
        .collect();
    let pick = |f: fn(&SageVoxel) -> f64| Array2::from_shape_vec(grid, voxels.iter().map(f).collect()).expect("grid");
    Ok(SageFit {
        t2: pick(|v| v.t2),
        t2s: pick(|v| v.t2s),
        s0_i: pick(|v| v.s0_i),
        s0_ii: pick(|v| v.s0_ii),
        valid: Array2::from_shape_vec(grid, voxels.iter().map(|v| v.valid).collect()).expect("grid"),
        converged: Array2::from_shape_vec(grid, voxels.iter().map(|v| v.converged).collect()).expect("grid"),
    })
}

/// Echo series predicted by a fit, for residual maps.
pub fn sage_predict(fit: &SageFit, tes: &[f64], te_se: f64) -> Vec<Array2<f64>> {
    tes.iter()
        .map(|&te| {
            let mut out = Array2::zeros(fit.t2.dim());
            Zip::from(&mut out)
                .and(&fit.t2)
                .and(&fit.t2s)
                .and(&fit.s0_i)
                .and(&fit.s0_ii)
                .and(&fit.valid)
                .for_each(|o, &t2, &t2s, &a, &b, &ok| {
                    if ok {
                        *o = sage_signal(te, te_se, t2, t2s, a, b);
                    }
                });
            out
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct DtiFit {
    /// `(n1, n2, 6)`, `[xx, yy, zz, xy, xz, yz]`, mm^2/s
    pub tensor: Array3<f64>,
    pub s0: Array2<f64>,
    pub fa: Array2<f64>,
    pub md: Array2<f64>,
    /// principal eigenvector, `(n1, n2, 3)`
    pub v1: Array3<f64>,
    pub valid: Array2<bool>,
    /// a negative eigenvalue was clamped to zero
    pub clamped: Array2<bool>,
}

fn design_row(b: f64, g: &[f64; 3]) -> [f64; 7] {
    [
        1.0,
        -b * g[0] * g[0],
        -b * g[1] * g[1],
        -b * g[2] * g[2],
        -2.0 * b * g[0] * g[1],
        -2.0 * b * g[0] * g[2],
        -2.0 * b * g[1] * g[2],
    ]
}

fn pinv(rows: &[[f64; 7]]) -> Option<DMatrix<f64>> {
    let a = DMatrix::from_fn(rows.len(), 7, |r, c| rows[r][c]);
    let svd = a.svd(true, true);
    if svd.rank(1e-10 * svd.singular_values.max()) < 7 {
        return None;
    }
    let eps = 1e-12 * svd.singular_values.max();
    svd.pseudo_inverse(eps).ok()
}

/// FA, MD, principal vector and clamp flag of a symmetric tensor.
pub fn tensor_scalars(d: &Tensor6) -> (f64, f64, [f64; 3], bool) {
    let m = Matrix3::new(d[0], d[3], d[4], d[3], d[1], d[5], d[4], d[5], d[2]);
    let eig = m.symmetric_eigen();
    let mut lam = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
    let clamped = lam.iter().any(|&l| l < 0.0);
    for l in &mut lam {
        *l = l.max(0.0);
    }
    let top = (0..3).max_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).expect("3");
    let v = eig.eigenvectors.column(top);
    let md = (lam[0] + lam[1] + lam[2]) / 3.0;
    let ss: f64 = lam.iter().map(|l| l * l).sum();
    let fa = if ss > 0.0 {
        let dev: f64 = lam.iter().map(|l| (l - md) * (l - md)).sum();
        ((1.5 * dev / ss).sqrt()).min(1.0)
    } else {
        0.0
    };
    (fa, md, [v[0], v[1], v[2]], clamped)
}

/// Log-linear tensor fit. `images[i]` was acquired with `bvals[i]`,
/// `bvecs[i]`; b=0 images carry any direction.
pub fn fit_dti(images: &[Array2<f64>], bvals: &[f64], bvecs: &[[f64; 3]], mask: &Array2<bool>) -> Result<DtiFit> {
    if images.len() != bvals.len() || images.len() != bvecs.len() {
        return Err(Error::shape("DTI acquisition table", &[images.len()], &[bvals.len(), bvecs.len()]));
    }
    if images.len() < 7 {
        return Err(Error::InvalidParameter(format!("DTI fit needs >= 7 images, got {}", images.len())));
    }
    let grid = images[0].dim();
    for im in images {
        check_same("DTI image", grid, im.dim())?;
    }
    check_same("DTI mask", grid, mask.dim())?;
    let rows: Vec<[f64; 7]> = bvals.iter().zip(bvecs).map(|(&b, g)| design_row(b, g)).collect();
    let full = pinv(&rows).ok_or_else(|| Error::InvalidParameter("DTI design matrix is rank deficient".into()))?;

    type Voxel = Option<([f64; 7], (f64, f64, [f64; 3], bool))>;
    let voxels: Vec<Voxel> = (0..grid.0 * grid.1)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / grid.1, idx % grid.1);
            if !mask[[i, j]] {
                return None;
            }
            let s: Vec<f64> = images.iter().map(|im| im[[i, j]]).collect();
            let good: Vec<usize> = (0..s.len()).filter(|&k| s[k] > 0.0 && s[k].is_finite()).collect();
            let coef = if good.len() == s.len() {
                &full * DVector::from_iterator(s.len(), s.iter().map(|v| v.ln()))
            } else {
                let sub: Vec<[f64; 7]> = good.iter().map(|&k| rows[k]).collect();
                let p = pinv(&sub)?;
                p * DVector::from_iterator(good.len(), good.iter().map(|&k| s[k].ln()))
            };
            let c: [f64; 7] = std::array::from_fn(|k| coef[k]);
            if c.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let d: Tensor6 = [c[1], c[2], c[3], c[4], c[5], c[6]];
            Some((c, tensor_scalars(&d)))
        })
        .collect();

    let mut fit = DtiFit {
        tensor: Array3::zeros((grid.0, grid.1, 6)),
        s0: Array2::zeros(grid),
        fa: Array2::zeros(grid),
        md: Array2::zeros(grid),
        v1: Array3::zeros((grid.0, grid.1, 3)),
        valid: Array2::from_elem(grid, false),
        clamped: Array2::from_elem(grid, false),
    };
    for (idx, v) in voxels.into_iter().enumerate() {
        let (i, j) = (idx / grid.1, idx % grid.1);
        if let Some((c, (fa, md, v1, clamped))) = v {
            for k in 0..6 {
                fit.tensor[[i, j, k]] = c[k + 1];
            }
            fit.s0[[i, j]] = c[0].exp();
            fit.fa[[i, j]] = fa;
            fit.md[[i, j]] = md;
            for k in 0..3 {
                fit.v1[[i, j, k]] = v1[k];
            }
            fit.valid[[i, j]] = true;
            fit.clamped[[i, j]] = clamped;
        }
    }
    Ok(fit)
}

/// RGB color-FA: `|v1| * FA` per channel, in `[0, 1]`.
pub fn color_fa(fit: &DtiFit) -> Array3<f64> {
    let (n1, n2) = fit.fa.dim();
    Array3::from_shape_fn((n1, n2, 3), |(i, j, c)| (fit.v1[[i, j, c]].abs() * fit.fa[[i, j]]).clamp(0.0, 1.0))
}
