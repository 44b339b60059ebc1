//! Complex 2-D grid primitives: centered unitary FFTs and the conjugate
//! k-space mirror.
//!
//! Convention: for a grid of length `n` along an axis the centre index is
//! `c = n / 2` (integer division). The centered DFT is
//!
//! ```text
//! X[i] = 1/sqrt(n) * sum_j x[j] * exp(-2*pi*i*(i - c)*(j - c)/n)
//! ```
//!
//! applied separably along both axes, so DC lives at `(c0, c1)` in k-space and
//! the transform is unitary in both directions.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Complex image on the (readout-extended) grid, rows = readout.
pub type ComplexImage = Array2<C64>;
/// Centered k-space grid, same shape as its image-domain counterpart.
pub type KSpaceGrid = Array2<C64>;
pub type RealImage = Array2<f64>;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

pub fn ensure_finite(a: &Array2<C64>, context: &str) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: context.to_string(),
        })
    }
}

/// `out[(i + shift) mod n] = a[i]` along both axes.
fn roll(a: &Array2<C64>, s0: usize, s1: usize) -> Array2<C64> {
    let (n0, n1) = a.dim();
    let mut out = Array2::zeros((n0, n1));
    for i in 0..n0 {
        let oi = (i + s0) % n0;
        for j in 0..n1 {
            out[[oi, (j + s1) % n1]] = a[[i, j]];
        }
    }
    out
}

fn fft_rows(a: &mut Array2<C64>, inverse: bool) {
    let n = a.ncols();
    let fft = plan(n, inverse);
    let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for mut row in a.rows_mut() {
        let slice = row.as_slice_mut().expect("standard layout");
        fft.process_with_scratch(slice, &mut scratch);
    }
}

fn fft2_inplace(a: &mut Array2<C64>, inverse: bool) {
    fft_rows(a, inverse);
    let mut t = a.t().as_standard_layout().into_owned();
    fft_rows(&mut t, inverse);
    a.assign(&t.t());
}

fn centered(a: &Array2<C64>, inverse: bool) -> Array2<C64> {
    let (n0, n1) = a.dim();
    // ifftshift moves the centre sample to index 0
    let mut work = roll(a, n0 - n0 / 2, n1 - n1 / 2);
    fft2_inplace(&mut work, inverse);
    let scale = 1.0 / ((n0 * n1) as f64).sqrt();
    work.mapv_inplace(|z| z * scale);
    roll(&work, n0 / 2, n1 / 2)
}

/// Unchecked centered forward transform for solver inner loops.
pub(crate) fn fft2c_raw(img: &Array2<C64>) -> Array2<C64> {
    centered(img, false)
}

pub(crate) fn ifft2c_raw(k: &Array2<C64>) -> Array2<C64> {
    centered(k, true)
}

/// Centered, unitary 2-D DFT.
pub fn fft2c(img: &ComplexImage) -> Result<KSpaceGrid> {
    ensure_finite(img, "fft2c input")?;
    Ok(fft2c_raw(img))
}

/// Exact inverse of [`fft2c`].
pub fn ifft2c(k: &KSpaceGrid) -> Result<ComplexImage> {
    ensure_finite(k, "ifft2c input")?;
    Ok(ifft2c_raw(k))
}

/// Index that `i` maps to under k -> -k on a centered axis of length `n`.
#[inline]
pub fn mirror_index(i: usize, n: usize) -> usize {
    (2 * (n / 2) + n - i) % n
}

/// Conjugate-symmetric counterpart: `out(kx, ky) = conj(k(-kx, -ky))`.
///
/// DC maps to itself for every grid size; on even axes the Nyquist row or
/// column maps to itself as well.
pub fn conj_mirror(k: &KSpaceGrid) -> KSpaceGrid {
    let (n0, n1) = k.dim();
    Array2::from_shape_fn((n0, n1), |(i, j)| {
        k[[mirror_index(i, n0), mirror_index(j, n1)]].conj()
    })
}

/// Mirror a boolean sampling pattern with the same index map as
/// [`conj_mirror`].
pub fn mirror_mask(mask: &Array2<bool>) -> Array2<bool> {
    let (n0, n1) = mask.dim();
    Array2::from_shape_fn((n0, n1), |(i, j)| {
        mask[[mirror_index(i, n0), mirror_index(j, n1)]]
    })
}

/// `<a, b> = sum conj(a) * b` over any shape.
pub fn inner<'a, D: ndarray::Dimension>(
    a: &'a ndarray::Array<C64, D>,
    b: &'a ndarray::Array<C64, D>,
) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr<D: ndarray::Dimension>(a: &ndarray::Array<C64, D>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn norm<D: ndarray::Dimension>(a: &ndarray::Array<C64, D>) -> f64 {
    norm_sqr(a).sqrt()
}

pub fn to_complex(a: &Array2<f64>) -> Array2<C64> {
    a.mapv(|v| C64::new(v, 0.0))
}

pub fn magnitude(a: &Array2<C64>) -> Array2<f64> {
    a.mapv(|z| z.norm())
}

pub fn phase(a: &Array2<C64>) -> Array2<f64> {
    a.mapv(|z| z.arg())
}

/// `m * exp(i*phi)` voxelwise.
pub fn polar(m: &Array2<f64>, phi: &Array2<f64>) -> Array2<C64> {
    let mut out = Array2::zeros(m.dim());
    Zip::from(&mut out)
        .and(m)
        .and(phi)
        .for_each(|o, &m, &p| *o = C64::from_polar(m, p));
    out
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(x: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut y = x % two_pi;
    if y <= -std::f64::consts::PI {
        y += two_pi;
    } else if y > std::f64::consts::PI {
        y -= two_pi;
    }
    y
}

/// Stack a list of equally-shaped images along a new leading axis.
pub fn stack(images: &[Array2<C64>]) -> ndarray::Array3<C64> {
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random(n0: usize, n1: usize, seed: u64) -> Array2<C64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n0, n1), |_| {
            C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    // Direct O(N^2) evaluation of the centered DFT definition.
    fn dft_oracle(x: &Array2<C64>, sign: f64) -> Array2<C64> {
        let (n0, n1) = x.dim();
        let (c0, c1) = ((n0 / 2) as f64, (n1 / 2) as f64);
        let scale = 1.0 / ((n0 * n1) as f64).sqrt();
        Array2::from_shape_fn((n0, n1), |(k0, k1)| {
            let mut acc = C64::new(0.0, 0.0);
            for j0 in 0..n0 {
                for j1 in 0..n1 {
                    let arg = sign
                        * 2.0
                        * PI
                        * (((k0 as f64 - c0) * (j0 as f64 - c0)) / n0 as f64
                            + ((k1 as f64 - c1) * (j1 as f64 - c1)) / n1 as f64);
                    acc += x[[j0, j1]] * C64::from_polar(1.0, arg);
                }
            }
            acc * scale
        })
    }

    fn max_diff(a: &Array2<C64>, b: &Array2<C64>) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn impulse_maps_to_constant() {
        let (n0, n1) = (6, 10);
        let mut x = Array2::zeros((n0, n1));
        x[[n0 / 2, n1 / 2]] = C64::new(1.0, 0.0);
        let k = fft2c(&x).unwrap();
        let expected = 1.0 / ((n0 * n1) as f64).sqrt();
        for z in k.iter() {
            assert!((z - C64::new(expected, 0.0)).norm() < 1e-14);
        }
        let back = ifft2c(&Array2::from_elem((n0, n1), C64::new(expected, 0.0))).unwrap();
        assert!(max_diff(&back, &x) < 1e-14);
    }

    #[test]
    fn matches_brute_force_dft() {
        let x = random(8, 8, 1);
        assert!(max_diff(&fft2c(&x).unwrap(), &dft_oracle(&x, -1.0)) < 1e-10);
        let y = random(6, 10, 2);
        assert!(max_diff(&ifft2c(&y).unwrap(), &dft_oracle(&y, 1.0)) < 1e-10);
        // odd sizes exercise the floor(n/2) centre
        let z = random(5, 7, 3);
        assert!(max_diff(&fft2c(&z).unwrap(), &dft_oracle(&z, -1.0)) < 1e-10);
    }

    #[test]
    fn round_trip_and_unitarity() {
        for seed in 0..100 {
            let x = random(6 + (seed % 3) as usize, 9 + (seed % 4) as usize, seed);
            let k = fft2c(&x).unwrap();
            assert!((norm(&k) - norm(&x)).abs() < 1e-12 * norm(&x).max(1.0));
            let back = ifft2c(&k).unwrap();
            assert!(max_diff(&back, &x) < 1e-12);
        }
    }

    #[test]
    fn fft_adjointness() {
        let x = random(8, 6, 10);
        let y = random(8, 6, 11);
        let lhs = inner(&fft2c(&x).unwrap(), &y);
        let rhs = inner(&x, &ifft2c(&y).unwrap());
        assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn rejects_non_finite() {
        let mut x = random(4, 4, 5);
        x[[1, 2]] = C64::new(f64::NAN, 0.0);
        assert!(matches!(fft2c(&x), Err(Error::NonFinite { .. })));
        x[[1, 2]] = C64::new(0.0, f64::INFINITY);
        assert!(ifft2c(&x).is_err());
    }

    #[test]
    fn mirror_of_real_image_kspace_is_identity() {
        for (n0, n1) in [(8, 8), (7, 10), (5, 5)] {
            let x = random(n0, n1, 7).mapv(|z| C64::new(z.re, 0.0));
            let k = fft2c(&x).unwrap();
            assert!(max_diff(&conj_mirror(&k), &k) < 1e-12);
        }
    }

    #[test]
    fn mirror_is_involution_and_fixes_dc() {
        let k = random(8, 6, 9);
        assert_eq!(conj_mirror(&conj_mirror(&k)), k);
        assert_eq!(mirror_index(4, 8), 4);
        assert_eq!(mirror_index(0, 8), 0);
        assert_eq!(mirror_index(2, 5), 2);
    }

    #[test]
    fn mirror_matches_index_oracle() {
        let k = random(6, 8, 4);
        let m = conj_mirror(&k);
        for i in 0..6 {
            for j in 0..8 {
                // frequency index relative to centre, negated, re-centred
                let ki = i as isize - 3;
                let kj = j as isize - 4;
                let si = (3 - ki).rem_euclid(6) as usize;
                let sj = (4 - kj).rem_euclid(8) as usize;
                assert_eq!(m[[i, j]], k[[si, sj]].conj());
            }
        }
    }

    #[test]
    fn mirror_is_self_adjoint_under_mirrored_inner_product() {
        // Re<M a, b> = Re<M b, a> for the antilinear mirror
        let a = random(6, 6, 20);
        let b = random(6, 6, 21);
        let lhs = inner(&conj_mirror(&a), &b).re;
        let rhs = inner(&conj_mirror(&b), &a).re;
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn wrap_into_half_open_interval() {
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(0.5) - 0.5).abs() < 1e-15);
        assert!((wrap_angle(-2.0 * PI - 0.25) + 0.25).abs() < 1e-12);
    }
}
