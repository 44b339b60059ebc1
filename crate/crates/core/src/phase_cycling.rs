//! Shot-phase estimation with a fixed magnitude.
//!
//! Minimizes `f(phi) = ||M F C (m e^{i phi}) - d_t||^2 + alpha ||W phi||_1`
//! over a real, unwrapped phase map by proximal gradient. Restarts shift the
//! wrap point of the initial phase by a random constant and keep the run with
//! the lowest objective.

use std::f64::consts::PI;

use ndarray::{Array2, Array3, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{adjoint_raw, forward_raw, CoilMaps, KSpaceShotSet, SamplingMask};
use crate::error::{Error, Result};
use crate::tensor::{norm_sqr, polar, wrap_angle, C64};
use crate::wavelet::{prox_wavelet_l1, wavelet_l1, Dwt2, Penalized, Wavelet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// `1/L` with `L` from power iteration, never adapted
    FixedLipschitz,
    /// start at `1/L`, halve until the quadratic upper bound holds
    #[default]
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseCycleConfig {
    pub alpha: f64,
    pub iters: usize,
    pub wavelet: Wavelet,
    pub levels: usize,
    pub penalized: Penalized,
    /// total runs, each with its own wrap offset; 1 is plain proximal gradient
    pub n_wraps: usize,
    pub step_rule: StepRule,
    pub seed: u64,
}

impl Default for PhaseCycleConfig {
    fn default() -> Self {
        PhaseCycleConfig {
            alpha: 1e-5,
            iters: 500,
            wavelet: Wavelet::Db4,
            levels: 4,
            penalized: Penalized::DetailOnly,
            n_wraps: 1,
            step_rule: StepRule::Backtracking,
            seed: 0,
        }
    }
}

impl PhaseCycleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidParameter(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.iters == 0 {
            return Err(Error::InvalidParameter("phase cycling needs at least one iteration".into()));
        }
        if !(1..=8).contains(&self.n_wraps) {
            return Err(Error::InvalidParameter(format!("n_wraps must be in 1..=8, got {}", self.n_wraps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PhaseEstimate {
    /// unwrapped phase, radians
    pub phase: Array2<f64>,
    pub objective: f64,
    /// objective after each accepted iteration of the winning run
    pub log: Vec<f64>,
    /// stopped early on a non-finite objective
    pub aborted: bool,
}

/// Fixed inputs of one shot's problem.
pub struct ShotProblem<'a> {
    pub m: &'a Array2<f64>,
    pub d_t: &'a Array3<C64>,
    pub coils: &'a CoilMaps,
    pub mask: &'a SamplingMask,
}

impl<'a> ShotProblem<'a> {
    pub fn new(m: &'a Array2<f64>, d_t: &'a Array3<C64>, coils: &'a CoilMaps, mask: &'a SamplingMask) -> Result<Self> {
        let grid = coils.grid();
        if m.dim() != grid || mask.dim() != grid {
            return Err(Error::shape("phase cycling grid", &[grid.0, grid.1], &[m.dim().0, m.dim().1]));
        }
        let (nc, a, b) = d_t.dim();
        if nc != coils.n_coils() || (a, b) != grid {
            return Err(Error::shape("phase cycling data", &[coils.n_coils(), grid.0, grid.1], &[nc, a, b]));
        }
        Ok(ShotProblem { m, d_t, coils, mask })
    }

    fn residual(&self, z: &Array2<C64>) -> Array3<C64> {
        forward_raw(z, self.coils.maps(), &self.mask.keep) - self.d_t
    }

    /// `||M F C m e^{i phi} - d_t||^2`
    pub fn data_term(&self, phi: &Array2<f64>) -> f64 {
        norm_sqr(&self.residual(&polar(self.m, phi)))
    }

    /// Data term and its gradient `2 Im(conj(z) . A^H r)`.
    pub fn data_gradient(&self, phi: &Array2<f64>) -> (f64, Array2<f64>) {
        let z = polar(self.m, phi);
        let r = self.residual(&z);
        let g = adjoint_raw(&r, self.coils.maps(), &self.mask.keep);
        let mut grad = Array2::zeros(phi.dim());
        Zip::from(&mut grad)
            .and(&z)
            .and(&g)
            .for_each(|o, &z, &g| *o = 2.0 * (z.conj() * g).im);
        (norm_sqr(&r), grad)
    }

    /// Largest eigenvalue of the Gauss-Newton Hessian `2 Re(diag(z*) A^H A diag(z))`.
    pub fn lipschitz(&self, phi: &Array2<f64>, iters: usize) -> f64 {
        let z = polar(self.m, phi);
        let mut v = Array2::from_elem(phi.dim(), 1.0);
        let mut lambda = 0.0;
        for _ in 0..iters {
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nv == 0.0 {
                break;
            }
            v.mapv_inplace(|x| x / nv);
            let zv = Zip::from(&z).and(&v).map_collect(|&z, &v| z * v);
            let ahav = adjoint_raw(&forward_raw(&zv, self.coils.maps(), &self.mask.keep), self.coils.maps(), &self.mask.keep);
            let w = Zip::from(&z).and(&ahav).map_collect(|&z, &g| 2.0 * (z.conj() * g).re);
            lambda = Zip::from(&w).and(&v).fold(0.0, |acc, &a, &b| acc + a * b);
            v = w;
        }
        lambda
    }
}

fn finite(a: &Array2<f64>) -> bool {
    a.iter().all(|v| v.is_finite())
}

fn run(problem: &ShotProblem<'_>, cfg: &PhaseCycleConfig, dwt: &Dwt2, phi_init: Array2<f64>) -> PhaseEstimate {
    let penalty = |p: &Array2<f64>| {
        if cfg.alpha == 0.0 {
            0.0
        } else {
            cfg.alpha * wavelet_l1(p, dwt, cfg.penalized)
        }
    };
    let mut phi = phi_init;
    let (mut f, mut grad) = problem.data_gradient(&phi);
    let mut obj = f + penalty(&phi);
    let mut log = Vec::with_capacity(cfg.iters);
    if !obj.is_finite() || !finite(&grad) {
        return PhaseEstimate { phase: phi, objective: obj, log, aborted: true };
    }
    let l = problem.lipschitz(&phi, 20);
    // objective curvature also has a term from e^{i phi}, so the bound is
    // only a starting guess
    let mut step = if l > 0.0 { 1.0 / l } else { 1.0 };

    for _ in 0..cfg.iters {
        let mut accepted = None;
        for _ in 0..60 {
            let trial = Zip::from(&phi).and(&grad).map_collect(|&p, &g| p - step * g);
            let cand = prox_wavelet_l1(&trial, cfg.alpha * step, dwt, cfg.penalized);
            if !finite(&cand) {
                return PhaseEstimate { phase: phi, objective: obj, log, aborted: true };
            }
            let (f_new, g_new) = problem.data_gradient(&cand);
            if !f_new.is_finite() {
                return PhaseEstimate { phase: phi, objective: obj, log, aborted: true };
            }
            if cfg.step_rule == StepRule::FixedLipschitz {
                accepted = Some((cand, f_new, g_new));
                break;
            }
            let (mut lin, mut quad) = (0.0, 0.0);
            Zip::from(&cand).and(&phi).and(&grad).for_each(|&c, &p, &g| {
                lin += g * (c - p);
                quad += (c - p) * (c - p);
            });
            if f_new <= f + lin + quad / (2.0 * step) {
                accepted = Some((cand, f_new, g_new));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, f_new, g_new)) = accepted else {
            break;
        };
        let obj_new = f_new + penalty(&cand);
        if !obj_new.is_finite() {
            return PhaseEstimate { phase: phi, objective: obj, log, aborted: true };
        }
        phi = cand;
        f = f_new;
        grad = g_new;
        obj = obj_new;
        log.push(obj);
    }
    PhaseEstimate { phase: phi, objective: obj, log, aborted: false }
}

/// Estimate the phase of one shot from `phi0` (e.g. the phase of the
/// denoised or multishot shot image).
pub fn estimate_shot_phase(problem: &ShotProblem<'_>, cfg: &PhaseCycleConfig, phi0: &Array2<f64>) -> Result<PhaseEstimate> {
    cfg.validate()?;
    if phi0.dim() != problem.m.dim() {
        let g = problem.m.dim();
        return Err(Error::shape("initial phase", &[g.0, g.1], &[phi0.dim().0, phi0.dim().1]));
    }
    if !finite(phi0) || problem.m.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "phase cycling input".into(),
        });
    }
    let dwt = Dwt2::new(cfg.wavelet, cfg.levels, phi0.dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<PhaseEstimate> = None;
    for w in 0..cfg.n_wraps {
        let offset = if w == 0 { 0.0 } else { rng.random_range(-PI..PI) };
        let init = if w == 0 {
            phi0.clone()
        } else {
            phi0.mapv(|p| wrap_angle(p + offset) - offset)
        };
        let est = run(problem, cfg, &dwt, init);
        let better = match &best {
            None => true,
            Some(b) => est.objective.is_finite() && (est.objective < b.objective || !b.objective.is_finite()),
        };
        if better {
            best = Some(est);
        }
    }
    let best = best.expect("n_wraps >= 1");
    if best.aborted && best.log.is_empty() && !best.objective.is_finite() {
        return Err(Error::NonFinite {
            context: "phase cycling objective".into(),
        });
    }
    Ok(best)
}

/// Every shot of one frame, solved independently.
pub fn estimate_phases(
    m: &Array2<f64>,
    d: &KSpaceShotSet,
    coils: &CoilMaps,
    cfg: &PhaseCycleConfig,
    phi0: &[Array2<f64>],
) -> Result<Vec<PhaseEstimate>> {
    if phi0.len() != d.n_shots() {
        return Err(Error::shape("initial phases", &[d.n_shots()], &[phi0.len()]));
    }
    (0..d.n_shots())
        .into_par_iter()
        .map(|t| {
            let d_t = d.shot(t);
            let problem = ShotProblem::new(m, &d_t, coils, &d.masks()[t])?;
            let shot_cfg = PhaseCycleConfig {
                seed: cfg.seed.wrapping_add(t as u64),
                ..cfg.clone()
            };
            estimate_shot_phase(&problem, &shot_cfg, &phi0[t])
        })
        .collect()
}
