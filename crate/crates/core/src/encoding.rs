//! SENSE forward model on the readout-extended FOV.
//!
//! Simultaneous multislice data are represented by stacking the MB slices
//! along the readout axis. Summing the slices in image space is then the same
//! as keeping every MB-th kx row of the extended k-space, up to a fixed
//! per-row phase (see [`sms_kx_phase`]) and the unitary `1/sqrt(MB)` scale.
//! No inter-slice CAIPI shift is modelled.

use ndarray::{s, Array2, Array3, Array4, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conj_mirror, fft2c_raw, ifft2c_raw, mirror_mask, C64};

/// Voxels with `sum |C|^2` below this fraction of the maximum are treated as
/// outside the coil support.
pub const SUPPORT_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    /// rows of the extended grid, `mb * n1`
    pub n1_ext: usize,
    pub n2: usize,
    pub mb: usize,
    pub r_inplane: usize,
}

impl Geometry {
    pub fn n1(&self) -> usize {
        self.n1_ext / self.mb
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    pub keep: Array2<bool>,
    /// zero-based shot number
    pub shot: usize,
    pub delta_ky: usize,
    pub r_inplane: usize,
    pub mb: usize,
    /// true for the k -> -k image of an acquired mask
    pub mirrored: bool,
}

impl SamplingMask {
    pub fn dim(&self) -> (usize, usize) {
        self.keep.dim()
    }

    pub fn count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Column indices of the sampled ky lines, in acquisition order.
    pub fn ky_lines(&self) -> Vec<usize> {
        let n2 = self.keep.ncols();
        (0..n2).filter(|&j| self.keep.column(j).iter().any(|&k| k)).collect()
    }

    pub fn mirror(&self) -> SamplingMask {
        SamplingMask {
            keep: mirror_mask(&self.keep),
            mirrored: !self.mirrored,
            ..self.clone()
        }
    }

    pub fn apply(&self, k: &mut Array2<C64>) {
        Zip::from(k).and(&self.keep).for_each(|z, &keep| {
            if !keep {
                *z = C64::new(0.0, 0.0);
            }
        });
    }
}

/// Build the sampling pattern of one shot.
///
/// Rows: every `mb`-th kx row, aligned so that the DC row is kept.
/// Columns: `floor(n2 / r_inplane)` ky lines at `delta_ky + r_inplane * l`
/// (mod `n2`).
pub fn make_mask(
    shot: usize,
    n1_ext: usize,
    n2: usize,
    r_inplane: usize,
    mb: usize,
    delta_ky: usize,
) -> Result<SamplingMask> {
    if r_inplane == 0 || mb == 0 || n1_ext == 0 || n2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "mask factors must be positive (n1_ext={n1_ext}, n2={n2}, R={r_inplane}, MB={mb})"
        )));
    }
    if n1_ext % mb != 0 {
        return Err(Error::InvalidParameter(format!(
            "extended readout {n1_ext} is not a multiple of MB={mb}"
        )));
    }
    let lines = n2 / r_inplane;
    if lines == 0 {
        return Err(Error::InvalidParameter(format!(
            "R={r_inplane} leaves no ky line in {n2} columns"
        )));
    }
    let c0 = n1_ext / 2;
    let mut keep = Array2::from_elem((n1_ext, n2), false);
    for l in 0..lines {
        let j = (delta_ky + r_inplane * l) % n2;
        for i in 0..n1_ext {
            if (i + mb * n1_ext - c0) % mb == 0 {
                keep[[i, j]] = true;
            }
        }
    }
    Ok(SamplingMask {
        keep,
        shot,
        delta_ky,
        r_inplane,
        mb,
        mirrored: false,
    })
}

/// Coil sensitivities on the extended grid, `(coils, n1_ext, n2)`.
#[derive(Debug, Clone)]
pub struct CoilMaps {
    maps: Array3<C64>,
    support: Array2<bool>,
    sos: Array2<f64>,
}

impl CoilMaps {
    /// Support taken as every voxel with `sum |C|^2` above
    /// [`SUPPORT_THRESHOLD`] of the maximum.
    pub fn new(maps: Array3<C64>) -> Result<Self> {
        let sos = sum_of_squares(&maps);
        let max = sos.iter().cloned().fold(0.0, f64::max);
        if !(max > 0.0) || !max.is_finite() {
            return Err(Error::InvalidParameter("coil maps are zero or non-finite".into()));
        }
        let support = sos.mapv(|v| v > SUPPORT_THRESHOLD * max);
        Ok(CoilMaps { maps, support, sos })
    }

    /// Coil maps with an explicitly declared support; fails if `C^H C`
    /// vanishes anywhere on it.
    pub fn with_support(maps: Array3<C64>, support: Array2<bool>) -> Result<Self> {
        if support.dim() != (maps.dim().1, maps.dim().2) {
            let (_, a, b) = maps.dim();
            let (c, d) = support.dim();
            return Err(Error::shape("coil support", &[a, b], &[c, d]));
        }
        let sos = sum_of_squares(&maps);
        if sos.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "coil maps".into(),
            });
        }
        let max = sos.iter().cloned().fold(0.0, f64::max);
        let bad: Vec<(usize, usize)> = support
            .indexed_iter()
            .filter(|&(idx, &s)| s && !(sos[idx] > SUPPORT_THRESHOLD * max))
            .map(|(idx, _)| idx)
            .collect();
        if !bad.is_empty() {
            return Err(Error::CoilSupport { voxels: bad });
        }
        Ok(CoilMaps { maps, support, sos })
    }

    pub fn maps(&self) -> &Array3<C64> {
        &self.maps
    }

    pub fn support(&self) -> &Array2<bool> {
        &self.support
    }

    /// `sum_c |C_c|^2` per voxel.
    pub fn sum_of_squares(&self) -> &Array2<f64> {
        &self.sos
    }

    pub fn n_coils(&self) -> usize {
        self.maps.dim().0
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.maps.dim().1, self.maps.dim().2)
    }

    /// Conjugated sensitivities, used for the virtual-coil block.
    pub fn conj(&self) -> CoilMaps {
        CoilMaps {
            maps: self.maps.mapv(|z| z.conj()),
            support: self.support.clone(),
            sos: self.sos.clone(),
        }
    }

    /// Pointwise `(C^H C)^{-1} C^H` applied to coil images; zero off support.
    pub fn combine(&self, coil_images: &Array3<C64>) -> Array2<C64> {
        let (_, n0, n1) = self.maps.dim();
        let mut out = Array2::zeros((n0, n1));
        for (c, img) in coil_images.outer_iter().enumerate() {
            let map = self.maps.index_axis(Axis(0), c);
            Zip::from(&mut out)
                .and(&img)
                .and(&map)
                .for_each(|o, &x, &s| *o += s.conj() * x);
        }
        Zip::from(&mut out)
            .and(&self.sos)
            .and(&self.support)
            .for_each(|o, &w, &inside| {
                *o = if inside { *o / w } else { C64::new(0.0, 0.0) };
            });
        out
    }
}

fn sum_of_squares(maps: &Array3<C64>) -> Array2<f64> {
    maps.map_axis(Axis(0), |v| v.iter().map(|z| z.norm_sqr()).sum())
}

/// Per-shot, per-coil zero-filled k-space `(shots, coils, n1_ext, n2)`.
#[derive(Debug, Clone)]
pub struct KSpaceShotSet {
    data: Array4<C64>,
    masks: Vec<SamplingMask>,
}

impl KSpaceShotSet {
    pub fn new(data: Array4<C64>, masks: Vec<SamplingMask>) -> Result<Self> {
        let (ns, _, n0, n1) = data.dim();
        if masks.len() != ns {
            return Err(Error::shape("shot masks", &[ns], &[masks.len()]));
        }
        for (t, m) in masks.iter().enumerate() {
            if m.dim() != (n0, n1) {
                return Err(Error::shape("mask grid", &[n0, n1], &[m.dim().0, m.dim().1]));
            }
            for coil in data.index_axis(Axis(0), t).outer_iter() {
                let leaked = Zip::from(&coil)
                    .and(&m.keep)
                    .fold(false, |acc, z, &k| acc || (!k && *z != C64::new(0.0, 0.0)));
                if leaked {
                    return Err(Error::InvalidParameter(format!(
                        "shot {t} has nonzero samples outside its mask"
                    )));
                }
            }
        }
        Ok(KSpaceShotSet { data, masks })
    }

    pub fn data(&self) -> &Array4<C64> {
        &self.data
    }

    pub fn masks(&self) -> &[SamplingMask] {
        &self.masks
    }

    pub fn n_shots(&self) -> usize {
        self.data.dim().0
    }

    pub fn n_coils(&self) -> usize {
        self.data.dim().1
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.data.dim().2, self.data.dim().3)
    }

    /// Coil k-space of one shot, `(coils, n1_ext, n2)`.
    pub fn shot(&self, t: usize) -> Array3<C64> {
        self.data.index_axis(Axis(0), t).to_owned()
    }
}

fn check_grid(context: &str, x: (usize, usize), coils: &CoilMaps, mask: &SamplingMask) -> Result<()> {
    if x != coils.grid() {
        return Err(Error::shape(context, &[coils.grid().0, coils.grid().1], &[x.0, x.1]));
    }
    if mask.dim() != x {
        return Err(Error::shape(context, &[x.0, x.1], &[mask.dim().0, mask.dim().1]));
    }
    Ok(())
}

pub(crate) fn forward_raw(x: &Array2<C64>, maps: &Array3<C64>, keep: &Array2<bool>) -> Array3<C64> {
    let (nc, n0, n1) = maps.dim();
    let mut out = Array3::zeros((nc, n0, n1));
    for (c, map) in maps.outer_iter().enumerate() {
        let coil_img = &map * x;
        let mut k = fft2c_raw(&coil_img);
        Zip::from(&mut k).and(keep).for_each(|z, &kp| {
            if !kp {
                *z = C64::new(0.0, 0.0);
            }
        });
        out.index_axis_mut(Axis(0), c).assign(&k);
    }
    out
}

pub(crate) fn adjoint_raw(d: &Array3<C64>, maps: &Array3<C64>, keep: &Array2<bool>) -> Array2<C64> {
    let (_, n0, n1) = maps.dim();
    let mut out = Array2::zeros((n0, n1));
    for (c, map) in maps.outer_iter().enumerate() {
        let mut k = d.index_axis(Axis(0), c).to_owned();
        Zip::from(&mut k).and(keep).for_each(|z, &kp| {
            if !kp {
                *z = C64::new(0.0, 0.0);
            }
        });
        let img = ifft2c_raw(&k);
        Zip::from(&mut out)
            .and(&img)
            .and(&map)
            .for_each(|o, &v, &s| *o += s.conj() * v);
    }
    out
}

/// `mask ⊙ fft2c(C_c ⊙ x)` for every coil.
pub fn sense_forward(x: &Array2<C64>, coils: &CoilMaps, mask: &SamplingMask) -> Result<Array3<C64>> {
    check_grid("sense_forward", x.dim(), coils, mask)?;
    Ok(forward_raw(x, coils.maps(), &mask.keep))
}

/// `sum_c conj(C_c) ⊙ ifft2c(mask ⊙ d_c)`, the exact adjoint of
/// [`sense_forward`].
pub fn sense_adjoint(d: &Array3<C64>, coils: &CoilMaps, mask: &SamplingMask) -> Result<Array2<C64>> {
    let (nc, n0, n1) = d.dim();
    check_grid("sense_adjoint", (n0, n1), coils, mask)?;
    if nc != coils.n_coils() {
        return Err(Error::shape("sense_adjoint coils", &[coils.n_coils()], &[nc]));
    }
    Ok(adjoint_raw(d, coils.maps(), &mask.keep))
}

/// Voxelwise sum of the MB slices, the image the scanner observes.
pub fn sms_collapse(slices: &[Array2<C64>]) -> Result<Array2<C64>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidParameter("sms_collapse needs at least one slice".into()))?;
    let mut out = first.clone();
    for s in &slices[1..] {
        if s.dim() != first.dim() {
            return Err(Error::shape("sms slice", &[first.dim().0, first.dim().1], &[s.dim().0, s.dim().1]));
        }
        out += s;
    }
    Ok(out)
}

/// Stack slices along the readout: slice `s` occupies rows `s*n1..(s+1)*n1`.
pub fn sms_extend<T: Clone>(slices: &[Array2<T>]) -> Result<Array2<T>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidParameter("sms_extend needs at least one slice".into()))?;
    if let Some(bad) = slices.iter().find(|s| s.dim() != first.dim()) {
        return Err(Error::shape("sms slice", &[first.dim().0, first.dim().1], &[bad.dim().0, bad.dim().1]));
    }
    let views: Vec<_> = slices.iter().map(|s| s.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal shapes"))
}

/// Inverse bookkeeping of [`sms_extend`].
pub fn sms_split<T: Clone>(extended: &Array2<T>, mb: usize) -> Result<Vec<Array2<T>>> {
    let n = extended.nrows();
    if mb == 0 || n % mb != 0 {
        return Err(Error::InvalidParameter(format!("cannot split {n} rows into MB={mb} slices")));
    }
    let n1 = n / mb;
    Ok((0..mb)
        .map(|s| extended.slice(s![s * n1..(s + 1) * n1, ..]).to_owned())
        .collect())
}

/// Phase relating the two SMS representations: for collapsed kx index `i1`
/// (centre `n1/2`), `fft2c(ext)[c_ext + mb*(i1 - c1), j]
///  = sms_kx_phase(i1, n1, mb) / sqrt(mb) * fft2c(collapse)[i1, j]`.
///
/// Equals `(-1)^(kappa*(mb-1))` when `n1` is even.
pub fn sms_kx_phase(i1: usize, n1: usize, mb: usize) -> C64 {
    let c1 = (n1 / 2) as f64;
    let ce = ((n1 * mb) / 2) as f64;
    let kappa = i1 as f64 - c1;
    C64::from_polar(1.0, 2.0 * std::f64::consts::PI * kappa * (ce - c1) / n1 as f64)
}

/// Virtual-coil counterpart of one shot: conjugate-mirrored data and mask.
pub fn vc_augment(d_t: &Array3<C64>, mask: &SamplingMask) -> (Array3<C64>, SamplingMask) {
    let mut out = Array3::zeros(d_t.dim());
    for (c, k) in d_t.outer_iter().enumerate() {
        out.index_axis_mut(Axis(0), c).assign(&conj_mirror(&k.to_owned()));
    }
    (out, mask.mirror())
}
