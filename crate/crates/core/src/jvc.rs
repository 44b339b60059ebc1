//! Joint virtual-coil SENSE: one real image from all shots.
//!
//! Each shot contributes its own block `M_t F (C e^{i phi_t}) m` and a
//! virtual-coil block `M_{-t} F (conj(C e^{i phi_t})) m` against the
//! conjugate-mirrored data. The unknown is real but signed; clamping is left
//! to display code.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::encoding::{adjoint_raw, forward_raw, vc_augment, CoilMaps, KSpaceShotSet};
use crate::error::{Error, Result};
use crate::tensor::{norm_sqr, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegKind {
    #[default]
    Tikhonov,
    Tv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JvcConfig {
    pub beta: f64,
    pub reg_kind: RegKind,
    pub cg_iters: usize,
    pub cg_tol: f64,
    /// outer proximal-gradient iterations for TV
    pub pd_iters: usize,
    pub pd_tol: f64,
    /// inner TV-prox iterations
    pub prox_iters: usize,
    pub real_constraint: bool,
    pub virtual_coils: bool,
}

impl Default for JvcConfig {
    fn default() -> Self {
        JvcConfig {
            beta: 1e-2,
            reg_kind: RegKind::Tikhonov,
            cg_iters: 100,
            cg_tol: 1e-8,
            pd_iters: 100,
            pd_tol: 1e-6,
            prox_iters: 100,
            real_constraint: true,
            virtual_coils: true,
        }
    }
}

impl JvcConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidParameter(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.cg_iters == 0 || self.pd_iters == 0 || self.prox_iters == 0 {
            return Err(Error::InvalidParameter("JVC iteration budgets must be positive".into()));
        }
        if self.reg_kind == RegKind::Tv && !self.real_constraint {
            return Err(Error::InvalidParameter("TV regularization requires a real unknown".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct JvcOutput {
    /// signed real solution, or the magnitude of the complex solution when
    /// the real constraint is off
    pub image: Array2<f64>,
    pub complex: Array2<C64>,
    pub iterations: usize,
    /// final relative residual (CG) or relative update (TV)
    pub residual: f64,
    /// false when the budget ran out before the tolerance
    pub converged: bool,
}

struct Block {
    sens: Array3<C64>,
    keep: Array2<bool>,
    data: Array3<C64>,
}

/// The stacked system for one frame.
pub struct JvcSystem {
    blocks: Vec<Block>,
    grid: (usize, usize),
    real: bool,
}

impl JvcSystem {
    pub fn new(d: &KSpaceShotSet, coils: &CoilMaps, phases: &[Array2<f64>], virtual_coils: bool, real: bool) -> Result<Self> {
        let grid = coils.grid();
        if d.grid() != grid || d.n_coils() != coils.n_coils() {
            return Err(Error::shape(
                "jvc data",
                &[coils.n_coils(), grid.0, grid.1],
                &[d.n_coils(), d.grid().0, d.grid().1],
            ));
        }
        if phases.len() != d.n_shots() {
            return Err(Error::shape("jvc phases", &[d.n_shots()], &[phases.len()]));
        }
        let mut blocks = Vec::new();
        for (t, phi) in phases.iter().enumerate() {
            if phi.dim() != grid {
                return Err(Error::shape("jvc phase map", &[grid.0, grid.1], &[phi.dim().0, phi.dim().1]));
            }
            if phi.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("jvc phase of shot {t}"),
                });
            }
            let rot = phi.mapv(|p| C64::from_polar(1.0, p));
            let mut sens = coils.maps().clone();
            for mut map in sens.outer_iter_mut() {
                map *= &rot;
            }
            let d_t = d.shot(t);
            let mask = &d.masks()[t];
            let vc = virtual_coils.then(|| vc_augment(&d_t, mask));
            let conj_sens = vc.is_some().then(|| sens.mapv(|z| z.conj()));
            blocks.push(Block {
                sens,
                keep: mask.keep.clone(),
                data: d_t,
            });
            if let (Some((vd, vmask)), Some(cs)) = (vc, conj_sens) {
                blocks.push(Block {
                    sens: cs,
                    keep: vmask.keep,
                    data: vd,
                });
            }
        }
        Ok(JvcSystem { blocks, grid, real })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Per-block residuals `A_b m - d_b`.
    pub fn residuals(&self, m: &Array2<C64>) -> Vec<Array3<C64>> {
        self.blocks
            .iter()
            .map(|b| forward_raw(m, &b.sens, &b.keep) - &b.data)
            .collect()
    }

    pub fn data_term(&self, m: &Array2<C64>) -> f64 {
        self.residuals(m).iter().map(norm_sqr).sum()
    }

    fn project(&self, mut x: Array2<C64>) -> Array2<C64> {
        if self.real {
            x.mapv_inplace(|z| C64::new(z.re, 0.0));
        }
        x
    }

    /// `P sum_b A_b^H A_b m`, with `P` the real-part projection when the
    /// unknown is real.
    pub fn normal(&self, m: &Array2<C64>) -> Array2<C64> {
        let mut acc = Array2::zeros(self.grid);
        for b in &self.blocks {
            acc += &adjoint_raw(&forward_raw(m, &b.sens, &b.keep), &b.sens, &b.keep);
        }
        self.project(acc)
    }

    /// `P sum_b A_b^H d_b`
    pub fn rhs(&self) -> Array2<C64> {
        let mut acc = Array2::zeros(self.grid);
        for b in &self.blocks {
            acc += &adjoint_raw(&b.data, &b.sens, &b.keep);
        }
        self.project(acc)
    }

    /// Largest eigenvalue of the normal operator.
    pub fn max_eigenvalue(&self, iters: usize) -> f64 {
        let mut v = self.project(Array2::from_elem(self.grid, C64::new(1.0, 0.0)));
        let mut lambda = 0.0;
        for _ in 0..iters {
            let n = norm_sqr(&v).sqrt();
            if n == 0.0 {
                break;
            }
            v.mapv_inplace(|z| z / n);
            let w = self.normal(&v);
            lambda = re_inner(&w, &v);
            v = w;
        }
        lambda
    }
}

fn re_inner(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
    Zip::from(a).and(b).fold(0.0, |acc, x, y| acc + (x.conj() * y).re)
}

/// Conjugate gradient on `(N + beta I) m = b` under the real inner product.
pub fn solve_tikhonov(sys: &JvcSystem, m0: &Array2<C64>, beta: f64, iters: usize, tol: f64) -> (Array2<C64>, usize, f64, bool) {
    let apply = |x: &Array2<C64>| sys.normal(x) + &x.mapv(|z| z * beta);
    let b = sys.rhs();
    let b_norm = norm_sqr(&b).sqrt();
    let mut x = sys.project(m0.clone());
    let mut r = &b - &apply(&x);
    let mut p = r.clone();
    let mut rr = re_inner(&r, &r);
    let scale = if b_norm > 0.0 { b_norm } else { 1.0 };
    let mut rel = rr.sqrt() / scale;
    if rel <= tol {
        return (x, 0, rel, true);
    }
    for it in 1..=iters {
        let ap = apply(&p);
        let pap = re_inner(&p, &ap);
        if !(pap > 0.0) {
            return (x, it, rel, false);
        }
        let a = rr / pap;
        Zip::from(&mut x).and(&p).for_each(|x, &p| *x += p * a);
        Zip::from(&mut r).and(&ap).for_each(|r, &q| *r -= q * a);
        let rr_new = re_inner(&r, &r);
        rel = rr_new.sqrt() / scale;
        if rel <= tol {
            return (x, it, rel, true);
        }
        let bcoef = rr_new / rr;
        Zip::from(&mut p).and(&r).for_each(|p, &r| *p = r + *p * bcoef);
        rr = rr_new;
    }
    (x, iters, rel, false)
}

/// Forward differences with a zero last difference along each axis.
pub fn gradient(u: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (n0, n1) = u.dim();
    let mut gx = Array2::zeros((n0, n1));
    let mut gy = Array2::zeros((n0, n1));
    for i in 0..n0 {
        for j in 0..n1 {
            if i + 1 < n0 {
                gx[[i, j]] = u[[i + 1, j]] - u[[i, j]];
            }
            if j + 1 < n1 {
                gy[[i, j]] = u[[i, j + 1]] - u[[i, j]];
            }
        }
    }
    (gx, gy)
}

/// Negative adjoint of [`gradient`].
pub fn divergence(px: &Array2<f64>, py: &Array2<f64>) -> Array2<f64> {
    let (n0, n1) = px.dim();
    let mut d = Array2::zeros((n0, n1));
    for i in 0..n0 {
        for j in 0..n1 {
            let mut v = 0.0;
            if i + 1 < n0 {
                v += px[[i, j]];
            }
            if i > 0 {
                v -= px[[i - 1, j]];
            }
            if j + 1 < n1 {
                v += py[[i, j]];
            }
            if j > 0 {
                v -= py[[i, j - 1]];
            }
            d[[i, j]] = v;
        }
    }
    d
}

/// Isotropic total variation.
pub fn tv_norm(u: &Array2<f64>) -> f64 {
    let (gx, gy) = gradient(u);
    Zip::from(&gx).and(&gy).fold(0.0, |acc, &a, &b| acc + (a * a + b * b).sqrt())
}

/// `argmin_u 1/2 ||u - v||^2 + lambda TV(u)` by fast gradient projection on
/// the dual.
pub fn tv_prox(v: &Array2<f64>, lambda: f64, iters: usize, tol: f64) -> Array2<f64> {
    if lambda <= 0.0 {
        return v.clone();
    }
    let dim = v.dim();
    let (mut px, mut py) = (Array2::<f64>::zeros(dim), Array2::<f64>::zeros(dim));
    let (mut rx, mut ry) = (px.clone(), py.clone());
    let mut t = 1.0f64;
    let mut u_prev = v.clone();
    for _ in 0..iters {
        let u = v + &(divergence(&rx, &ry) * lambda);
        let (gx, gy) = gradient(&u);
        let step = 1.0 / (8.0 * lambda);
        let mut nx = &rx + &(gx * step);
        let mut ny = &ry + &(gy * step);
        Zip::from(&mut nx).and(&mut ny).for_each(|a, b| {
            let n = (*a * *a + *b * *b).sqrt().max(1.0);
            *a /= n;
            *b /= n;
        });
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let w = (t - 1.0) / t_next;
        rx = &nx + &((&nx - &px) * w);
        ry = &ny + &((&ny - &py) * w);
        px = nx;
        py = ny;
        t = t_next;

        let u_new = v + &(divergence(&px, &py) * lambda);
        let diff = (&u_new - &u_prev).mapv(|x| x * x).sum().sqrt();
        let scale = u_new.mapv(|x| x * x).sum().sqrt().max(f64::MIN_POSITIVE);
        u_prev = u_new;
        if diff / scale < tol {
            break;
        }
    }
    u_prev
}

fn solve_tv(sys: &JvcSystem, m0: &Array2<C64>, cfg: &JvcConfig) -> Result<(Array2<C64>, usize, f64, bool)> {
    let l = 2.0 * sys.max_eigenvalue(30);
    if !(l > 0.0) || !l.is_finite() {
        return Err(Error::Numerical(format!("JVC operator norm estimate is {l}")));
    }
    // slightly conservative against power-iteration underestimate
    let step = 0.95 / l;
    let b = sys.rhs().mapv(|z| z.re);
    let grad = |m: &Array2<f64>| {
        let nm = sys.normal(&m.mapv(|v| C64::new(v, 0.0))).mapv(|z| z.re);
        (nm - &b) * 2.0
    };
    let mut x = m0.mapv(|z| z.re);
    let mut y = x.clone();
    let mut tau = 1.0f64;
    let mut rel = f64::INFINITY;
    for it in 1..=cfg.pd_iters {
        let g = grad(&y);
        let x_new = tv_prox(&(&y - &(g * step)), step * cfg.beta, cfg.prox_iters, cfg.pd_tol);
        if x_new.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("JVC TV iterate {it}"),
            });
        }
        let diff = (&x_new - &x).mapv(|v| v * v).sum().sqrt();
        let scale = x.mapv(|v| v * v).sum().sqrt();
        rel = if scale > 0.0 { diff / scale } else { f64::INFINITY };
        let tau_next = (1.0 + (1.0 + 4.0 * tau * tau).sqrt()) / 2.0;
        y = &x_new + &((&x_new - &x) * ((tau - 1.0) / tau_next));
        tau = tau_next;
        x = x_new;
        if rel < cfg.pd_tol {
            return Ok((x.mapv(|v| C64::new(v, 0.0)), it, rel, true));
        }
    }
    Ok((x.mapv(|v| C64::new(v, 0.0)), cfg.pd_iters, rel, false))
}

/// Solve for the final image from `m0` and the per-shot phases.
pub fn solve_jvc(
    m0: &Array2<f64>,
    phases: &[Array2<f64>],
    d: &KSpaceShotSet,
    coils: &CoilMaps,
    cfg: &JvcConfig,
) -> Result<JvcOutput> {
    cfg.validate()?;
    if m0.dim() != coils.grid() {
        let g = coils.grid();
        return Err(Error::shape("jvc initial image", &[g.0, g.1], &[m0.dim().0, m0.dim().1]));
    }
    let sys = JvcSystem::new(d, coils, phases, cfg.virtual_coils, cfg.real_constraint)?;
    let m0c = m0.mapv(|v| C64::new(v, 0.0));
    let (m, iterations, residual, converged) = match cfg.reg_kind {
        RegKind::Tikhonov => solve_tikhonov(&sys, &m0c, cfg.beta, cfg.cg_iters, cfg.cg_tol),
        RegKind::Tv => solve_tv(&sys, &m0c, cfg)?,
    };
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite {
            context: "JVC solution".into(),
        });
    }
    let image = if cfg.real_constraint {
        m.mapv(|z| z.re)
    } else {
        m.mapv(|z| z.norm())
    };
    Ok(JvcOutput {
        image,
        complex: m,
        iterations,
        residual,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tv_of_constant_and_step() {
        assert_eq!(tv_norm(&Array2::from_elem((6, 5), 2.5)), 0.0);
        let (n, h) = (7, 1.7);
        let step = Array2::from_shape_fn((n, 6), |(_, j)| if j >= 3 { h } else { 0.0 });
        assert!((tv_norm(&step) - h * n as f64).abs() < 1e-12);
    }

    #[test]
    fn tv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = Array2::from_shape_fn((9, 7), |_| rng.random_range(-1.0..1.0));
        let mut direct = 0.0;
        for i in 0..9 {
            for j in 0..7 {
                let dx = if i < 8 { u[[i + 1, j]] - u[[i, j]] } else { 0.0 };
                let dy = if j < 6 { u[[i, j + 1]] - u[[i, j]] } else { 0.0 };
                direct += f64::hypot(dx, dy);
            }
        }
        assert!((tv_norm(&u) - direct).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_negative_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
        let px = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
        let py = Array2::from_shape_fn((6, 8), |_| rng.random_range(-1.0..1.0));
        let (gx, gy) = gradient(&u);
        let lhs = (&gx * &px).sum() + (&gy * &py).sum();
        let rhs = -(&u * &divergence(&px, &py)).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn tv_prox_decreases_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let v = Array2::from_shape_fn((12, 12), |(i, _)| if i < 6 { 0.0 } else { 1.0 } + rng.random_range(-0.2..0.2));
        let lambda = 0.1;
        let u = tv_prox(&v, lambda, 300, 1e-10);
        let obj = |w: &Array2<f64>| 0.5 * (w - &v).mapv(|x| x * x).sum() + lambda * tv_norm(w);
        assert!(obj(&u) < obj(&v));
        for s in 0..10 {
            let mut r = ChaCha8Rng::seed_from_u64(100 + s);
            let pert = u.mapv(|x| x + r.random_range(-1e-3..1e-3));
            assert!(obj(&pert) >= obj(&u) - 1e-6);
        }
        assert_eq!(tv_prox(&v, 0.0, 10, 1e-6), v);
    }

    #[test]
    fn config_validation() {
        assert!(JvcConfig::default().validate().is_ok());
        assert!(JvcConfig { beta: -1.0, ..Default::default() }.validate().is_err());
        assert!(JvcConfig { reg_kind: RegKind::Tv, real_constraint: false, ..Default::default() }
            .validate()
            .is_err());
    }
}
