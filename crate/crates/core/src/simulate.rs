//! Synthetic acquisitions with exact ground truth.
//!
//! Phantoms are sums of ellipses on normalized coordinates `[-1, 1]^2`
//! (row axis first). Coil maps are smooth Gaussian lobes with a linear phase
//! ramp, shot phases are low-order polynomials plus Gaussian-filtered noise,
//! and k-space noise is i.i.d. complex Gaussian on the sampled locations.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{AcquisitionGeometry, Dataset, Manifest, Protocol, Truth, MANIFEST_VERSION};
use crate::encoding::{forward_raw, make_mask, sms_extend, CoilMaps, KSpaceShotSet, SamplingMask};
use crate::error::{Error, Result};
use crate::tensor::{polar, C64};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// centre (row, col) in normalized coordinates
    pub center: (f64, f64),
    /// semi-axes (row, col)
    pub axes: (f64, f64),
    /// rotation in radians
    pub angle: f64,
    /// additive intensity
    pub value: f64,
    /// tissue class painted by this ellipse (last one wins)
    pub tissue: usize,
}

impl Ellipse {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - self.center.0, v - self.center.1);
        let (s, c) = self.angle.sin_cos();
        let a = c * du + s * dv;
        let b = -s * du + c * dv;
        (a / self.axes.0).powi(2) + (b / self.axes.1).powi(2) <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub rows: usize,
    pub cols: usize,
    pub ellipses: Vec<Ellipse>,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Array2<f64>,
    pub support: Array2<bool>,
    /// tissue class per voxel, 0 outside every ellipse
    pub tissue: Array2<usize>,
}

/// Normalized coordinate of index `i` on an axis of length `n`.
pub fn coord(i: usize, n: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / n as f64 - 1.0
}

pub fn make_phantom(spec: &PhantomSpec) -> Phantom {
    let (rows, cols) = (spec.rows, spec.cols);
    let mut image = Array2::zeros((rows, cols));
    let mut support = Array2::from_elem((rows, cols), false);
    let mut tissue = Array2::zeros((rows, cols));
    for ((i, j), v) in image.indexed_iter_mut() {
        let (u, w) = (coord(i, rows), coord(j, cols));
        for e in &spec.ellipses {
            if e.contains(u, w) {
                *v += e.value;
                support[[i, j]] = true;
                tissue[[i, j]] = e.tissue;
            }
        }
    }
    Phantom { image, support, tissue }
}

/// Modified Shepp-Logan head with all intensities positive. Tissue classes:
/// 1 skull/scalp, 2 parenchyma, 3 ventricles (CSF), 4 lesions.
pub fn shepp_logan(rows: usize, cols: usize) -> PhantomSpec {
    let deg = std::f64::consts::PI / 180.0;
    let e = |c: (f64, f64), a: (f64, f64), ang: f64, value: f64, tissue: usize| Ellipse {
        center: c,
        axes: a,
        angle: ang * deg,
        value,
        tissue,
    };
    PhantomSpec {
        rows,
        cols,
        ellipses: vec![
            e((0.0, 0.0), (0.92, 0.69), 0.0, 1.0, 1),
            e((-0.0184, 0.0), (0.874, 0.6624), 0.0, -0.6, 2),
            e((0.0, 0.22), (0.41, 0.11), -18.0, 0.4, 3),
            e((0.0, -0.22), (0.31, 0.16), 18.0, 0.4, 3),
            e((-0.35, 0.0), (0.25, 0.21), 0.0, 0.15, 2),
            e((-0.1, 0.0), (0.046, 0.046), 0.0, 0.15, 4),
            e((0.1, 0.0), (0.046, 0.046), 0.0, 0.15, 4),
            e((0.605, -0.08), (0.023, 0.046), 0.0, 0.15, 4),
            e((0.605, 0.0), (0.023, 0.023), 0.0, 0.15, 4),
            e((0.605, 0.06), (0.046, 0.023), 0.0, 0.15, 4),
        ],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoilSpec {
    pub n_coils: usize,
    /// Gaussian lobe width in normalized units; larger is smoother
    pub width: f64,
    /// radius of the coil ring in normalized units
    pub radius: f64,
    /// peak linear-phase excursion across the FOV, radians
    pub phase_ramp: f64,
    /// coils alternate between two rings at `z = +-ring_offset`
    pub ring_offset: f64,
    /// distance between simultaneously excited slices along `z`
    pub slice_gap: f64,
}

impl Default for CoilSpec {
    fn default() -> Self {
        CoilSpec {
            n_coils: 8,
            width: 0.9,
            radius: 1.3,
            phase_ramp: 5.0,
            ring_offset: 0.5,
            slice_gap: 1.0,
        }
    }
}

/// Coil maps for one slice at height `z`; `rotation` turns the coil ring.
pub fn make_coil_maps_slice(spec: &CoilSpec, rows: usize, cols: usize, rotation: f64, z: f64) -> Array3<C64> {
    let nc = spec.n_coils;
    if nc == 1 {
        return Array3::from_elem((1, rows, cols), C64::new(1.0, 0.0));
    }
    let mut maps = Array3::zeros((nc, rows, cols));
    for c in 0..nc {
        let theta = rotation + 2.0 * std::f64::consts::PI * c as f64 / nc as f64;
        let (cu, cv) = (spec.radius * theta.cos(), spec.radius * theta.sin());
        let (pu, pv) = (theta.sin(), -theta.cos());
        let zc = if c % 2 == 0 { spec.ring_offset } else { -spec.ring_offset };
        let wz = (-(z - zc).powi(2) / (2.0 * spec.width * spec.width)).exp();
        for i in 0..rows {
            for j in 0..cols {
                let (u, v) = (coord(i, rows), coord(j, cols));
                let r2 = (u - cu).powi(2) + (v - cv).powi(2);
                let amp = wz * (-r2 / (2.0 * spec.width * spec.width)).exp();
                let ph = 0.5 * spec.phase_ramp * (pu * u + pv * v) + theta;
                maps[[c, i, j]] = C64::from_polar(amp, ph);
            }
        }
    }
    maps
}

/// Coil maps on the readout-extended grid for `mb` slices of `n1 x n2`.
/// Slices sit `slice_gap` apart around `z = 0`, and successive slices see the
/// ring rotated by half a coil spacing.
pub fn make_coil_maps(spec: &CoilSpec, n1: usize, n2: usize, mb: usize) -> Result<CoilMaps> {
    if spec.n_coils == 0 || mb == 0 {
        return Err(Error::InvalidParameter("need at least one coil and one slice".into()));
    }
    let step = std::f64::consts::PI / spec.n_coils as f64;
    let per_slice: Vec<Array3<C64>> = (0..mb)
        .map(|s| {
            let z = (s as f64 - (mb as f64 - 1.0) / 2.0) * spec.slice_gap;
            make_coil_maps_slice(spec, n1, n2, step * s as f64, z)
        })
        .collect();
    let views: Vec<_> = per_slice.iter().map(|m| m.view()).collect();
    let maps = ndarray::concatenate(Axis(1), &views).expect("equal shapes");
    CoilMaps::new(maps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShotPhaseModel {
    /// polynomial order, 0..=2
    pub poly_order: usize,
    /// coefficient range of the polynomial terms, radians
    pub poly_amplitude: f64,
    /// standard deviation of the smooth random component, radians
    pub random_std: f64,
    /// Gaussian filter width of the random component, voxels
    pub filter_width: f64,
    /// hard bound on |phi|; the field is rescaled if it would exceed it
    pub amplitude: f64,
}

impl Default for ShotPhaseModel {
    fn default() -> Self {
        ShotPhaseModel::structural()
    }
}

impl ShotPhaseModel {
    /// Physiological shot-to-shot variation without diffusion encoding.
    pub fn structural() -> Self {
        ShotPhaseModel {
            poly_order: 1,
            poly_amplitude: 0.15,
            random_std: 0.08,
            filter_width: 12.0,
            amplitude: 0.3,
        }
    }

    /// Diffusion-amplified variation, up to a full turn of phase.
    pub fn diffusion() -> Self {
        ShotPhaseModel {
            poly_order: 2,
            poly_amplitude: 1.2,
            random_std: 0.6,
            filter_width: 12.0,
            amplitude: std::f64::consts::PI,
        }
    }
}

/// Separable Gaussian smoothing with clamped edges.
pub fn gaussian_filter(x: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return x.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / total).collect();
    let (n0, n1) = x.dim();
    let conv = |get: &dyn Fn(isize) -> f64, n: usize, i: usize| -> f64 {
        kernel
            .iter()
            .enumerate()
            .map(|(t, w)| w * get((i as isize + t as isize - radius).clamp(0, n as isize - 1)))
            .sum()
    };
    let mut tmp = Array2::zeros((n0, n1));
    for i in 0..n0 {
        for j in 0..n1 {
            tmp[[i, j]] = conv(&|jj| x[[i, jj as usize]], n1, j);
        }
    }
    let mut out = Array2::zeros((n0, n1));
    for i in 0..n0 {
        for j in 0..n1 {
            out[[i, j]] = conv(&|ii| tmp[[ii as usize, j]], n0, i);
        }
    }
    out
}

/// Ground-truth phase maps, one per shot.
pub fn make_shot_phases(model: &ShotPhaseModel, n_shots: usize, rows: usize, cols: usize, seed: u64) -> Result<Vec<Array2<f64>>> {
    if model.poly_order > 2 {
        return Err(Error::InvalidParameter(format!("polynomial order {} > 2", model.poly_order)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_shots);
    for _ in 0..n_shots {
        if model.amplitude == 0.0 {
            out.push(Array2::zeros((rows, cols)));
            continue;
        }
        let mut coeffs = [0.0; 6];
        let terms = [1, 3, 6][model.poly_order];
        for c in coeffs.iter_mut().take(terms) {
            *c = if model.poly_amplitude > 0.0 {
                rng.random_range(-model.poly_amplitude..=model.poly_amplitude)
            } else {
                0.0
            };
        }
        let mut field = Array2::from_shape_fn((rows, cols), |(i, j)| {
            let (u, v) = (coord(i, rows), coord(j, cols));
            coeffs[0] + coeffs[1] * u + coeffs[2] * v + coeffs[3] * u * u + coeffs[4] * u * v + coeffs[5] * v * v
        });
        if model.random_std > 0.0 {
            let noise = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
            let smooth = gaussian_filter(&noise, model.filter_width);
            let mean = smooth.mean().unwrap_or(0.0);
            let std = smooth.mapv(|v| (v - mean).powi(2)).mean().unwrap_or(0.0).sqrt();
            if std > 0.0 {
                field.zip_mut_with(&smooth, |f, &s| *f += model.random_std * (s - mean) / std);
            }
        }
        let peak = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if peak > model.amplitude {
            let scale = model.amplitude / peak;
            field.mapv_inplace(|v| v * scale);
        }
        out.push(field);
    }
    Ok(out)
}

/// Two-regime SAGE signal model.
#[derive(Debug, Clone, PartialEq)]
pub struct SageModelParams {
    pub t2: Array2<f64>,
    pub t2s: Array2<f64>,
    pub s0_i: Array2<f64>,
    pub s0_ii: Array2<f64>,
    /// echo times, ms
    pub tes: Vec<f64>,
    /// spin-echo time, ms; echoes before `te_se / 2` precede the refocusing pulse
    pub te_se: f64,
}

/// Acquired SAGE echo times, ms.
pub const SAGE_TES: [f64; 5] = [26.0, 61.0, 95.0, 130.0, 165.0];

/// Signal of one voxel at echo time `te`.
pub fn sage_signal(te: f64, te_se: f64, t2: f64, t2s: f64, s0_i: f64, s0_ii: f64) -> f64 {
    let (r2, r2s) = (1.0 / t2, 1.0 / t2s);
    if te < te_se / 2.0 {
        s0_i * (-te * r2s).exp()
    } else {
        s0_ii * (-te_se * (r2s - r2)).exp() * (-te * (2.0 * r2 - r2s)).exp()
    }
}

impl SageModelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self
            .t2
            .iter()
            .zip(self.t2s.iter())
            .all(|(&t2, &t2s)| t2 > 0.0 && t2s > 0.0 && t2s <= t2);
        if !ok {
            return Err(Error::InvalidParameter("SAGE parameters need 0 < T2* <= T2".into()));
        }
        Ok(())
    }
}

/// Echo image series of the SAGE model.
pub fn synthesize_sage(p: &SageModelParams) -> Result<Vec<Array2<f64>>> {
    p.validate()?;
    Ok(p.tes
        .iter()
        .map(|&te| {
            let mut out = Array2::zeros(p.t2.dim());
            for ((idx, o), &t2) in out.indexed_iter_mut().zip(p.t2.iter()) {
                *o = sage_signal(te, p.te_se, t2, p.t2s[idx], p.s0_i[idx], p.s0_ii[idx]);
            }
            out
        })
        .collect())
}

/// Symmetric tensor stored as `[xx, yy, zz, xy, xz, yz]`.
pub type Tensor6 = [f64; 6];

pub fn tensor_quadratic(d: &Tensor6, g: &[f64; 3]) -> f64 {
    d[0] * g[0] * g[0]
        + d[1] * g[1] * g[1]
        + d[2] * g[2] * g[2]
        + 2.0 * (d[3] * g[0] * g[1] + d[4] * g[0] * g[2] + d[5] * g[1] * g[2])
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionModel {
    /// per-voxel tensors, row-major over the grid, mm^2/s
    pub tensors: Array2<Tensor6>,
    /// s/mm^2
    pub bvals: Vec<f64>,
    pub bvecs: Vec<[f64; 3]>,
}

/// Six non-collinear directions (the usual icosahedral half-set).
pub fn six_directions() -> Vec<[f64; 3]> {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        [s, s, 0.0],
        [s, -s, 0.0],
        [s, 0.0, s],
        [s, 0.0, -s],
        [0.0, s, s],
        [0.0, s, -s],
    ]
}

/// `S_i = S0 * exp(-b_i g_i^T D g_i)`.
pub fn synthesize_dwi(s0: &Array2<f64>, model: &DiffusionModel) -> Result<Vec<Array2<f64>>> {
    if model.bvals.len() != model.bvecs.len() {
        return Err(Error::InvalidParameter("bvals and bvecs differ in length".into()));
    }
    for g in &model.bvecs {
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if (n - 1.0).abs() > 1e-9 && n != 0.0 {
            return Err(Error::InvalidParameter(format!("gradient direction {g:?} is not unit norm")));
        }
    }
    if s0.dim() != model.tensors.dim() {
        let (a, b) = s0.dim();
        let (c, d) = model.tensors.dim();
        return Err(Error::shape("dwi tensors", &[a, b], &[c, d]));
    }
    Ok(model
        .bvals
        .iter()
        .zip(&model.bvecs)
        .map(|(&b, g)| {
            let mut out = s0.clone();
            out.zip_mut_with(&model.tensors, |s, d| *s *= (-b * tensor_quadratic(d, g)).exp());
            out
        })
        .collect())
}

/// Sample the k-space of every shot: `d_t = mask_t ⊙ fft2c(C ⊙ x_t) + noise`,
/// with noise of standard deviation `noise_std` per real/imaginary channel.
pub fn acquire(shots: &Array3<C64>, coils: &CoilMaps, masks: &[SamplingMask], noise_std: f64, seed: u64) -> Result<KSpaceShotSet> {
    let (ns, n0, n1) = shots.dim();
    if masks.len() != ns {
        return Err(Error::shape("acquire masks", &[ns], &[masks.len()]));
    }
    if (n0, n1) != coils.grid() {
        let (a, b) = coils.grid();
        return Err(Error::shape("acquire grid", &[a, b], &[n0, n1]));
    }
    let nc = coils.n_coils();
    let mut data = Array4::zeros((ns, nc, n0, n1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..ns {
        let mut k = forward_raw(&shots.index_axis(Axis(0), t).to_owned(), coils.maps(), &masks[t].keep);
        if noise_std > 0.0 {
            for mut coil in k.outer_iter_mut() {
                ndarray::Zip::from(&mut coil).and(&masks[t].keep).for_each(|z, &kp| {
                    if kp {
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        *z += C64::new(re, im) * noise_std;
                    }
                });
            }
        }
        data.index_axis_mut(Axis(0), t).assign(&k);
    }
    KSpaceShotSet::new(data, masks.to_vec())
}

/// Masks for `delta_ky` shifts on the extended grid.
pub fn shot_masks(n1_ext: usize, n2: usize, r_inplane: usize, mb: usize, deltas: &[usize]) -> Result<Vec<SamplingMask>> {
    deltas
        .iter()
        .enumerate()
        .map(|(t, &d)| make_mask(t, n1_ext, n2, r_inplane, mb, d))
        .collect()
}

/// Shot images `m * exp(i phi_t)`.
pub fn shot_images(m: &Array2<f64>, phases: &[Array2<f64>]) -> Array3<C64> {
    let imgs: Vec<_> = phases.iter().map(|p| polar(m, p)).collect();
    crate::tensor::stack(&imgs)
}

/// Extend per-slice real maps onto the readout-extended grid.
pub fn extend_real(slices: &[Array2<f64>]) -> Result<Array2<f64>> {
    sms_extend(slices)
}

/// Which shot-phase regime a dataset uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhaseRegime {
    Structural,
    Diffusion,
}

impl PhaseRegime {
    pub fn model(&self) -> ShotPhaseModel {
        match self {
            PhaseRegime::Structural => ShotPhaseModel::structural(),
            PhaseRegime::Diffusion => ShotPhaseModel::diffusion(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub protocol: Protocol,
    /// per-slice grid
    pub n1: usize,
    pub n2: usize,
    pub mb: usize,
    pub r_inplane: usize,
    pub n_shots: usize,
    pub coils: CoilSpec,
    /// defaults to structural for SAGE and b=0, diffusion otherwise
    pub phase_regime: Option<PhaseRegime>,
    /// per real/imaginary channel, in image intensity units
    pub noise_std: f64,
    pub seed: u64,
    /// keep only the first frames (echoes or directions)
    pub max_frames: Option<usize>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            protocol: Protocol::Sage,
            n1: 64,
            n2: 64,
            mb: 2,
            r_inplane: 8,
            n_shots: 2,
            coils: CoilSpec::default(),
            phase_regime: None,
            noise_std: 0.002,
            seed: 0,
            max_frames: None,
        }
    }
}

/// Per-slice phantoms: the second slice is the first flipped top to bottom.
fn slice_phantoms(n1: usize, n2: usize, mb: usize) -> Vec<Phantom> {
    let base = make_phantom(&shepp_logan(n1, n2));
    (0..mb)
        .map(|s| {
            if s % 2 == 0 {
                base.clone()
            } else {
                Phantom {
                    image: base.image.slice(ndarray::s![..;-1, ..]).to_owned(),
                    support: base.support.slice(ndarray::s![..;-1, ..]).to_owned(),
                    tissue: base.tissue.slice(ndarray::s![..;-1, ..]).to_owned(),
                }
            }
        })
        .collect()
}

/// (T2, T2*) in ms per tissue class.
fn sage_tissue(tissue: usize) -> (f64, f64) {
    match tissue {
        1 => (60.0, 35.0),
        2 => (85.0, 52.0),
        3 => (300.0, 200.0),
        _ => (110.0, 70.0),
    }
}

/// Tensor of a tissue class at normalized position `(u, v)`.
fn dwi_tissue(tissue: usize, u: f64, v: f64) -> Tensor6 {
    let iso = |d: f64| [d, d, d, 0.0, 0.0, 0.0];
    match tissue {
        1 => iso(0.8e-3),
        3 => iso(3.0e-3),
        4 => iso(1.2e-3),
        _ => {
            // circumferential fibres
            let th = v.atan2(u) + std::f64::consts::FRAC_PI_2;
            let (s, c) = th.sin_cos();
            let (l1, l2) = (1.7e-3, 0.3e-3);
            let e = [c, s, 0.0];
            let d = |a: usize, b: usize| (l1 - l2) * e[a] * e[b] + if a == b { l2 } else { 0.0 };
            [d(0, 0), d(1, 1), d(2, 2), d(0, 1), d(0, 2), d(1, 2)]
        }
    }
}

/// Build a complete synthetic dataset with ground truth.
pub fn simulate_dataset(cfg: &SimulationConfig) -> Result<Dataset> {
    if cfg.n_shots == 0 || cfg.mb == 0 || cfg.r_inplane == 0 {
        return Err(Error::InvalidParameter("shots, MB and R must be positive".into()));
    }
    let geometry = AcquisitionGeometry::interleaved(cfg.n1, cfg.n2, cfg.mb, cfg.r_inplane, cfg.n_shots);
    let masks = geometry.masks()?;
    let coils = make_coil_maps(&cfg.coils, cfg.n1, cfg.n2, cfg.mb)?;
    let phantoms = slice_phantoms(cfg.n1, cfg.n2, cfg.mb);
    let support = sms_extend(&phantoms.iter().map(|p| p.support.clone()).collect::<Vec<_>>())?;
    let map_slices = |f: &dyn Fn(&Phantom, usize, usize) -> f64| -> Result<Array2<f64>> {
        let slices: Vec<Array2<f64>> = phantoms
            .iter()
            .map(|p| Array2::from_shape_fn((cfg.n1, cfg.n2), |(i, j)| f(p, i, j)))
            .collect();
        sms_extend(&slices)
    };

    let mut manifest = Manifest {
        schema_version: MANIFEST_VERSION,
        protocol: cfg.protocol,
        geometry,
        n_frames: 0,
        n_coils: cfg.coils.n_coils,
        tes: Vec::new(),
        te_se: None,
        bvals: Vec::new(),
        bvecs: Vec::new(),
        noise_std: cfg.noise_std,
        seed: Some(cfg.seed),
        has_truth: true,
        truth_params: Vec::new(),
    };

    let (mut images, params, regimes) = match cfg.protocol {
        Protocol::Sage => {
            let t2 = map_slices(&|p, i, j| if p.support[[i, j]] { sage_tissue(p.tissue[[i, j]]).0 } else { 0.0 })?;
            let t2s = map_slices(&|p, i, j| if p.support[[i, j]] { sage_tissue(p.tissue[[i, j]]).1 } else { 0.0 })?;
            let s0_i = map_slices(&|p, i, j| p.image[[i, j]])?;
            let s0_ii = s0_i.mapv(|v| 0.9 * v);
            let te_se = SAGE_TES[4];
            let echoes: Vec<Array2<f64>> = SAGE_TES
                .iter()
                .map(|&te| {
                    let mut out = Array2::zeros(t2.dim());
                    for ((idx, o), &sup) in out.indexed_iter_mut().zip(support.iter()) {
                        if sup {
                            *o = sage_signal(te, te_se, t2[idx], t2s[idx], s0_i[idx], s0_ii[idx]);
                        }
                    }
                    out
                })
                .collect();
            manifest.tes = SAGE_TES.to_vec();
            manifest.te_se = Some(te_se);
            let regime = cfg.phase_regime.unwrap_or(PhaseRegime::Structural);
            let params = vec![
                ("t2".to_string(), t2),
                ("t2s".to_string(), t2s),
                ("s0_i".to_string(), s0_i),
                ("s0_ii".to_string(), s0_ii),
            ];
            (echoes, params, vec![regime; SAGE_TES.len()])
        }
        Protocol::Dwi => {
            let s0 = map_slices(&|p, i, j| p.image[[i, j]])?;
            let comp = |k: usize| {
                map_slices(&|p, i, j| {
                    if p.support[[i, j]] {
                        dwi_tissue(p.tissue[[i, j]], coord(i, cfg.n1), coord(j, cfg.n2))[k]
                    } else {
                        0.0
                    }
                })
            };
            let comps: Vec<Array2<f64>> = (0..6).map(comp).collect::<Result<_>>()?;
            let tensors = Array2::from_shape_fn(s0.dim(), |idx| std::array::from_fn(|k| comps[k][idx]));
            let mut bvals = vec![0.0];
            let mut bvecs = vec![[0.0, 0.0, 0.0]];
            for g in six_directions() {
                bvals.push(1000.0);
                bvecs.push(g);
            }
            let model = DiffusionModel { tensors, bvals: bvals.clone(), bvecs: bvecs.clone() };
            let imgs = synthesize_dwi(&s0, &model)?;
            let regimes = bvals
                .iter()
                .map(|&b| {
                    cfg.phase_regime
                        .unwrap_or(if b > 0.0 { PhaseRegime::Diffusion } else { PhaseRegime::Structural })
                })
                .collect();
            manifest.bvals = bvals;
            manifest.bvecs = bvecs;
            let names = ["dxx", "dyy", "dzz", "dxy", "dxz", "dyz"];
            let mut params = vec![("s0".to_string(), s0)];
            params.extend(names.iter().map(|n| n.to_string()).zip(comps));
            (imgs, params, regimes)
        }
    };

    let n_frames = cfg.max_frames.unwrap_or(images.len()).min(images.len());
    images.truncate(n_frames);
    manifest.tes.truncate(n_frames);
    manifest.bvals.truncate(n_frames);
    manifest.bvecs.truncate(n_frames);
    manifest.n_frames = n_frames;

    let mut frames = Vec::with_capacity(n_frames);
    let mut phases = Vec::with_capacity(n_frames);
    for (f, m) in images.iter().enumerate() {
        let frame_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(f as u64);
        let model = regimes[f].model();
        // independent phase fields per slice, joined along the readout
        let per_slice: Vec<Vec<Array2<f64>>> = (0..cfg.mb)
            .map(|s| make_shot_phases(&model, cfg.n_shots, cfg.n1, cfg.n2, frame_seed.wrapping_mul(31).wrapping_add(s as u64)))
            .collect::<Result<_>>()?;
        let shot_phases: Vec<Array2<f64>> = (0..cfg.n_shots)
            .map(|t| sms_extend(&per_slice.iter().map(|p| p[t].clone()).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        let x = shot_images(m, &shot_phases);
        frames.push(acquire(&x, &coils, &masks, cfg.noise_std, frame_seed ^ 0x5eed)?);
        let views: Vec<_> = shot_phases.iter().map(|p| p.view()).collect();
        phases.push(ndarray::stack(Axis(0), &views).expect("equal grids"));
    }

    let ds = Dataset {
        manifest,
        coils,
        frames,
        truth: Some(Truth {
            magnitude: images,
            phases,
            support,
            params,
        }),
    };
    ds.validate()?;
    Ok(ds)
}
