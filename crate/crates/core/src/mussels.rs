//! SMS-MUSSELS: multishot recovery with a low-rank block-Hankel prior.
//!
//! Each iteration lifts the k-space of the current shot stack, keeps the `k`
//! leading singular values, returns to image space, and then for every shot
//! re-inserts the acquired samples into the coil images before coil
//! combination. With `use_fista` the next iterate is extrapolated with
//! Nesterov momentum. Momentum is applied to the image stack; the unitary FFT
//! makes this identical to extrapolating in k-space.

use ndarray::{Array2, Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::encoding::{adjoint_raw, forward_raw, CoilMaps, KSpaceShotSet};
use crate::error::{Error, Result};
use crate::hankel::{lowrank_project, HankelGeometry, RankBudget, SvdMethod};
use crate::tensor::{fft2c_raw, ifft2c_raw, inner, norm, norm_sqr, C64};

/// Stop threshold that worked best for the structural (SAGE) data.
pub const REL_TOL_STRUCTURAL: f64 = 1e-3;
/// Stop threshold that worked best for diffusion data.
pub const REL_TOL_DIFFUSION: f64 = 3e-3;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct MusselsConfig {
    pub budget: RankBudget,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub use_fista: bool,
    pub svd: SvdMethod,
    pub init: InitialGuess,
    /// CG iterations of the SENSE starts
    pub init_cg_iters: usize,
    /// print one JSON line per iteration to stderr
    pub verbose: bool,
}

impl Default for MusselsConfig {
    fn default() -> Self {
        MusselsConfig {
            budget: RankBudget { r: 5, n_eff: 1.0 },
            max_iter: 200,
            rel_tol: REL_TOL_STRUCTURAL,
            use_fista: true,
            svd: SvdMethod::Auto,
            init: InitialGuess::JointSense,
            init_cg_iters: 20,
            verbose: false,
        }
    }
}

impl MusselsConfig {
    pub fn validate(&self) -> Result<()> {
        RankBudget::new(self.budget.r, self.budget.n_eff)?;
        if self.max_iter == 0 {
            return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidParameter("rel_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub relative_update: f64,
    /// `sqrt(sum_t ||F_t C x_t - d_t||^2) / ||d||` of the combined images
    pub data_residual: f64,
}

#[derive(Debug, Clone)]
pub struct MusselsOutput {
    /// shot images `(shots, n1_ext, n2)`
    pub images: Array3<C64>,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

/// What an observer sees after each data-consistency sweep.
pub struct IterationView<'a> {
    pub iteration: usize,
    pub shot: usize,
    /// coil images of this shot right after resubstitution
    pub coil_images: &'a Array3<C64>,
}

/// FISTA momentum sequence, `tau_1 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FistaState {
    pub tau: f64,
}

impl Default for FistaState {
    fn default() -> Self {
        FistaState { tau: 1.0 }
    }
}

impl FistaState {
    /// Advance `tau` and return the extrapolation weight `(tau_i - 1) / tau_{i+1}`.
    pub fn step(&mut self) -> f64 {
        let next = (1.0 + (1.0 + 4.0 * self.tau * self.tau).sqrt()) / 2.0;
        let weight = (self.tau - 1.0) / next;
        self.tau = next;
        weight
    }
}

/// `||x_new - x_old|| / ||x_old||`, infinite when `x_old` is zero.
pub fn relative_update<D: ndarray::Dimension>(x_new: &ndarray::Array<C64, D>, x_old: &ndarray::Array<C64, D>) -> f64 {
    let denom = norm(x_old);
    if denom == 0.0 {
        return f64::INFINITY;
    }
    let diff: f64 = x_new
        .iter()
        .zip(x_old.iter())
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    diff.sqrt() / denom
}

fn check_inputs(d: &KSpaceShotSet, coils: &CoilMaps) -> Result<()> {
    if d.grid() != coils.grid() {
        let (a, b) = coils.grid();
        let (c, e) = d.grid();
        return Err(Error::shape("multishot k-space grid", &[a, b], &[c, e]));
    }
    if d.n_coils() != coils.n_coils() {
        return Err(Error::shape("multishot coils", &[coils.n_coils()], &[d.n_coils()]));
    }
    Ok(())
}

/// Replace the acquired samples of every coil image of one shot, returning
/// the coil images.
pub fn resubstitute(x_t: &Array2<C64>, d_t: &Array3<C64>, coils: &CoilMaps, keep: &Array2<bool>) -> Array3<C64> {
    let maps = coils.maps();
    let mut coil_images = Array3::zeros(maps.dim());
    for (c, map) in maps.outer_iter().enumerate() {
        let xc = &map * x_t;
        let mut k = fft2c_raw(&xc);
        let dc = d_t.index_axis(Axis(0), c);
        Zip::from(&mut k).and(&dc).and(keep).for_each(|z, &d, &kp| {
            if kp {
                *z = d;
            }
        });
        coil_images.index_axis_mut(Axis(0), c).assign(&ifft2c_raw(&k));
    }
    coil_images
}

/// Shot-wise coil-combined zero-filled images `(C^H C)^{-1} C^H F^H d_t`.
pub fn sense_initial_guess(d: &KSpaceShotSet, coils: &CoilMaps) -> Result<Array3<C64>> {
    check_inputs(d, coils)?;
    let (n0, n1) = d.grid();
    let mut out = Array3::zeros((d.n_shots(), n0, n1));
    for t in 0..d.n_shots() {
        let zero = Array2::zeros((n0, n1));
        let coil_images = resubstitute(&zero, &d.shot(t), coils, &d.masks()[t].keep);
        out.index_axis_mut(Axis(0), t).assign(&coils.combine(&coil_images));
    }
    Ok(out)
}

/// How the iteration is started when no `x0` is given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialGuess {
    /// coil-combined zero-filled images of each shot
    ZeroFilled,
    /// SENSE of each shot on its own
    ShotSense,
    /// one SENSE image from all shots together, copied to every shot; shot
    /// phase differences are ignored
    #[default]
    JointSense,
}

/// `iters` CG steps from zero on `sum_t A_t^H A_t z = sum_t A_t^H d_t` over
/// the given shots. Early stopping regularizes the underdetermined cases.
fn cg_sense(d: &KSpaceShotSet, coils: &CoilMaps, shots: &[usize], iters: usize) -> Array2<C64> {
    let (n0, n1) = d.grid();
    let normal = |x: &Array2<C64>| {
        let mut acc = Array2::<C64>::zeros((n0, n1));
        for &t in shots {
            let keep = &d.masks()[t].keep;
            acc += &adjoint_raw(&forward_raw(x, coils.maps(), keep), coils.maps(), keep);
        }
        acc
    };
    let mut x = Array2::<C64>::zeros((n0, n1));
    let mut r = Array2::<C64>::zeros((n0, n1));
    for &t in shots {
        r += &adjoint_raw(&d.shot(t), coils.maps(), &d.masks()[t].keep);
    }
    let mut p = r.clone();
    let mut rr = norm_sqr(&r);
    let rr0 = rr;
    for _ in 0..iters {
        if rr == 0.0 || rr <= 1e-30 * rr0 {
            break;
        }
        let ap = normal(&p);
        let alpha = rr / inner(&p, &ap).re;
        x.scaled_add(C64::new(alpha, 0.0), &p);
        r.scaled_add(C64::new(-alpha, 0.0), &ap);
        let rr_new = norm_sqr(&r);
        p = &r + &(p * C64::new(rr_new / rr, 0.0));
        rr = rr_new;
    }
    x
}

/// Shot-wise SENSE images after `iters` CG steps.
pub fn shot_sense(d: &KSpaceShotSet, coils: &CoilMaps, iters: usize) -> Result<Array3<C64>> {
    check_inputs(d, coils)?;
    let (n0, n1) = d.grid();
    let mut out = Array3::zeros((d.n_shots(), n0, n1));
    for t in 0..d.n_shots() {
        out.index_axis_mut(Axis(0), t).assign(&cg_sense(d, coils, &[t], iters));
    }
    Ok(out)
}

/// One SENSE image from every shot, repeated per shot.
pub fn joint_sense(d: &KSpaceShotSet, coils: &CoilMaps, iters: usize) -> Result<Array3<C64>> {
    check_inputs(d, coils)?;
    let shots: Vec<usize> = (0..d.n_shots()).collect();
    let z = cg_sense(d, coils, &shots, iters);
    let (n0, n1) = d.grid();
    let mut out = Array3::zeros((d.n_shots(), n0, n1));
    for mut shot in out.outer_iter_mut() {
        shot.assign(&z);
    }
    Ok(out)
}

pub fn initial_guess(d: &KSpaceShotSet, coils: &CoilMaps, kind: InitialGuess, cg_iters: usize) -> Result<Array3<C64>> {
    match kind {
        InitialGuess::ZeroFilled => sense_initial_guess(d, coils),
        InitialGuess::ShotSense => shot_sense(d, coils, cg_iters),
        InitialGuess::JointSense => joint_sense(d, coils, cg_iters),
    }
}

fn data_residual(x: &Array3<C64>, d: &KSpaceShotSet, coils: &CoilMaps, d_norm: f64) -> f64 {
    let mut acc = 0.0;
    for (t, x_t) in x.outer_iter().enumerate() {
        let pred = forward_raw(&x_t.to_owned(), coils.maps(), &d.masks()[t].keep);
        acc += norm_sqr(&(pred - &d.shot(t)));
    }
    if d_norm > 0.0 {
        acc.sqrt() / d_norm
    } else {
        acc.sqrt()
    }
}

/// The k-space of every shot image.
fn to_kspace(x: &Array3<C64>) -> Array3<C64> {
    let mut k = Array3::zeros(x.dim());
    for (t, img) in x.outer_iter().enumerate() {
        k.index_axis_mut(Axis(0), t).assign(&fft2c_raw(&img.to_owned()));
    }
    k
}

fn to_image(k: &Array3<C64>) -> Array3<C64> {
    let mut x = Array3::zeros(k.dim());
    for (t, kt) in k.outer_iter().enumerate() {
        x.index_axis_mut(Axis(0), t).assign(&ifft2c_raw(&kt.to_owned()));
    }
    x
}

enum Prior<'a> {
    LowRank(&'a RankBudget, SvdMethod),
    None,
}

/// Divergence: five consecutive growing updates with a net growth above 10x.
fn diverging(log: &[IterationRecord]) -> bool {
    if log.len() < 6 {
        return false;
    }
    let tail = &log[log.len() - 6..];
    let growing = tail.windows(2).all(|w| w[1].relative_update > w[0].relative_update);
    growing && tail[5].relative_update > 10.0 * tail[0].relative_update
}

#[allow(clippy::too_many_arguments)]
fn iterate(
    d: &KSpaceShotSet,
    coils: &CoilMaps,
    prior: Prior<'_>,
    max_iter: usize,
    rel_tol: f64,
    use_fista: bool,
    verbose: bool,
    x0: Option<&Array3<C64>>,
    init: (InitialGuess, usize),
    observer: &mut dyn FnMut(&IterationView<'_>),
) -> Result<MusselsOutput> {
    check_inputs(d, coils)?;
    let (n0, n1) = d.grid();
    let x_init = match x0 {
        Some(x) => {
            if x.dim() != (d.n_shots(), n0, n1) {
                let (a, b, c) = x.dim();
                return Err(Error::shape("initial shot stack", &[d.n_shots(), n0, n1], &[a, b, c]));
            }
            x.clone()
        }
        None => initial_guess(d, coils, init.0, init.1)?,
    };
    let d_norm = norm(d.data());
    let mut fista = FistaState::default();
    let mut x_prev = x_init.clone();
    let mut y = x_init;
    let mut log = Vec::new();
    let mut converged = false;

    for iteration in 1..=max_iter {
        let mut x = match prior {
            // a full budget skips the FFT round trip entirely
            Prior::LowRank(budget, _) if budget.is_identity(&HankelGeometry::new(d.n_shots(), n0, n1, budget.r)?) => {
                y.clone()
            }
            Prior::LowRank(budget, method) => to_image(&lowrank_project(&to_kspace(&y), budget, method)?),
            Prior::None => y.clone(),
        };
        for t in 0..d.n_shots() {
            let x_t = x.index_axis(Axis(0), t).to_owned();
            let coil_images = resubstitute(&x_t, &d.shot(t), coils, &d.masks()[t].keep);
            observer(&IterationView {
                iteration,
                shot: t,
                coil_images: &coil_images,
            });
            x.index_axis_mut(Axis(0), t).assign(&coils.combine(&coil_images));
        }
        if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("mussels iterate {iteration}"),
            });
        }

        let record = IterationRecord {
            iteration,
            relative_update: relative_update(&x, &x_prev),
            data_residual: data_residual(&x, d, coils, d_norm),
        };
        if verbose {
            eprintln!("{}", serde_json::to_string(&record)?);
        }
        log.push(record);
        if diverging(&log) {
            return Err(Error::Divergence {
                iteration,
                update: record.relative_update,
                state: Box::new(x),
            });
        }
        if record.relative_update < rel_tol {
            converged = true;
            x_prev = x;
            break;
        }

        y = if use_fista {
            let w = fista.step();
            let mut y = x.clone();
            Zip::from(&mut y)
                .and(&x)
                .and(&x_prev)
                .for_each(|y, &a, &b| *y = a + (a - b) * w);
            y
        } else {
            x.clone()
        };
        x_prev = x;
    }

    Ok(MusselsOutput {
        images: x_prev,
        log,
        converged,
    })
}

/// Reconstruct per-shot images from undersampled multishot k-space.
///
/// `x0` defaults to [`sense_initial_guess`].
pub fn solve_mussels(
    d: &KSpaceShotSet,
    coils: &CoilMaps,
    cfg: &MusselsConfig,
    x0: Option<&Array3<C64>>,
) -> Result<MusselsOutput> {
    solve_mussels_observed(d, coils, cfg, x0, |_| {})
}

pub fn solve_mussels_observed(
    d: &KSpaceShotSet,
    coils: &CoilMaps,
    cfg: &MusselsConfig,
    x0: Option<&Array3<C64>>,
    mut observer: impl FnMut(&IterationView<'_>),
) -> Result<MusselsOutput> {
    cfg.validate()?;
    iterate(
        d,
        coils,
        Prior::LowRank(&cfg.budget, cfg.svd),
        cfg.max_iter,
        cfg.rel_tol,
        cfg.use_fista,
        cfg.verbose,
        x0,
        (cfg.init, cfg.init_cg_iters),
        &mut observer,
    )
}

/// Shot-by-shot POCS-SENSE: the same loop without the low-rank step.
/// `x0` defaults to the coil-combined zero-filled images.
pub fn solve_pocs_sense(
    d: &KSpaceShotSet,
    coils: &CoilMaps,
    max_iter: usize,
    rel_tol: f64,
    x0: Option<&Array3<C64>>,
    mut observer: impl FnMut(&IterationView<'_>),
) -> Result<MusselsOutput> {
    if max_iter == 0 || !(rel_tol > 0.0) {
        return Err(Error::InvalidParameter("max_iter >= 1 and rel_tol > 0 required".into()));
    }
    iterate(d, coils, Prior::None, max_iter, rel_tol, false, false, x0, (InitialGuess::ZeroFilled, 0), &mut observer)
}

/// `m = 1/N_s sum_t |x_t|`.
pub fn shot_magnitude(x: &Array3<C64>) -> Array2<f64> {
    let n = x.dim().0 as f64;
    x.map_axis(Axis(0), |v| v.iter().map(|z| z.norm()).sum::<f64>() / n)
}
