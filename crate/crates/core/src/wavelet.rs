//! Orthogonal periodic 2-D discrete wavelet transform.
//!
//! Coefficients are stored in the usual Mallat layout: after `L` levels the
//! `(rows >> L) x (cols >> L)` block in the top-left corner holds the scaling
//! coefficients and everything else is detail.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wavelet {
    Haar,
    /// Daubechies, four vanishing moments (8 taps)
    #[default]
    Db4,
}

const HAAR: [f64; 2] = [std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2];

const DB4: [f64; 8] = [
    0.230_377_813_308_896_5,
    0.714_846_570_552_915_6,
    0.630_880_767_929_858_9,
    -0.027_983_769_416_859_854,
    -0.187_034_811_719_093_08,
    0.030_841_381_835_560_764,
    0.032_883_011_666_885_2,
    -0.010_597_401_785_069_032,
];

impl Wavelet {
    pub fn lowpass(&self) -> &'static [f64] {
        match self {
            Wavelet::Haar => &HAAR,
            Wavelet::Db4 => &DB4,
        }
    }

    fn highpass(&self) -> Vec<f64> {
        let h = self.lowpass();
        let n = h.len();
        (0..n)
            .map(|m| if m % 2 == 0 { h[n - 1 - m] } else { -h[n - 1 - m] })
            .collect()
    }
}

/// A transform plan for one grid shape.
#[derive(Debug, Clone)]
pub struct Dwt2 {
    wavelet: Wavelet,
    levels: usize,
    shape: (usize, usize),
    lo: Vec<f64>,
    hi: Vec<f64>,
}

/// Largest usable level count: each level needs both current dimensions even.
pub fn max_levels(rows: usize, cols: usize) -> usize {
    let (mut r, mut c, mut l) = (rows, cols, 0);
    while r % 2 == 0 && c % 2 == 0 && r >= 2 && c >= 2 {
        r /= 2;
        c /= 2;
        l += 1;
    }
    l
}

impl Dwt2 {
    /// Levels beyond what the shape allows are silently reduced.
    pub fn new(wavelet: Wavelet, levels: usize, shape: (usize, usize)) -> Self {
        let levels = levels.min(max_levels(shape.0, shape.1));
        Dwt2 {
            wavelet,
            levels,
            shape,
            lo: wavelet.lowpass().to_vec(),
            hi: wavelet.highpass(),
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn wavelet(&self) -> Wavelet {
        self.wavelet
    }

    /// Size of the scaling-coefficient block.
    pub fn approx_shape(&self) -> (usize, usize) {
        (self.shape.0 >> self.levels, self.shape.1 >> self.levels)
    }

    pub fn is_detail(&self, i: usize, j: usize) -> bool {
        let (ar, ac) = self.approx_shape();
        i >= ar || j >= ac
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.dim(), self.shape, "dwt shape");
        let mut c = x.clone();
        let (mut r, mut cl) = self.shape;
        let mut buf = Vec::new();
        for _ in 0..self.levels {
            for i in 0..r {
                buf.clear();
                buf.extend(c.slice(s![i, ..cl]).iter());
                let out = self.analyze(&buf);
                c.slice_mut(s![i, ..cl]).assign(&ndarray::ArrayView1::from(&out[..]));
            }
            for j in 0..cl {
                buf.clear();
                buf.extend(c.slice(s![..r, j]).iter());
                let out = self.analyze(&buf);
                c.slice_mut(s![..r, j]).assign(&ndarray::ArrayView1::from(&out[..]));
            }
            r /= 2;
            cl /= 2;
        }
        c
    }

    pub fn inverse(&self, coeffs: &Array2<f64>) -> Array2<f64> {
        assert_eq!(coeffs.dim(), self.shape, "idwt shape");
        let mut c = coeffs.clone();
        let mut buf = Vec::new();
        for level in (0..self.levels).rev() {
            let (r, cl) = (self.shape.0 >> level, self.shape.1 >> level);
            for j in 0..cl {
                buf.clear();
                buf.extend(c.slice(s![..r, j]).iter());
                let out = self.synthesize(&buf);
                c.slice_mut(s![..r, j]).assign(&ndarray::ArrayView1::from(&out[..]));
            }
            for i in 0..r {
                buf.clear();
                buf.extend(c.slice(s![i, ..cl]).iter());
                let out = self.synthesize(&buf);
                c.slice_mut(s![i, ..cl]).assign(&ndarray::ArrayView1::from(&out[..]));
            }
        }
        c
    }

    // [approx | detail], periodic extension
    fn analyze(&self, x: &[f64]) -> Vec<f64> {
        let n = x.len();
        let half = n / 2;
        let mut out = vec![0.0; n];
        for k in 0..half {
            let (mut a, mut d) = (0.0, 0.0);
            for (m, (&l, &h)) in self.lo.iter().zip(&self.hi).enumerate() {
                let v = x[(2 * k + m) % n];
                a += l * v;
                d += h * v;
            }
            out[k] = a;
            out[half + k] = d;
        }
        out
    }

    fn synthesize(&self, c: &[f64]) -> Vec<f64> {
        let n = c.len();
        let half = n / 2;
        let mut out = vec![0.0; n];
        for k in 0..half {
            let (a, d) = (c[k], c[half + k]);
            for (m, (&l, &h)) in self.lo.iter().zip(&self.hi).enumerate() {
                out[(2 * k + m) % n] += l * a + h * d;
            }
        }
        out
    }
}

#[inline]
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Which coefficients the l1 penalty touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Penalized {
    All,
    /// scaling coefficients are left free
    #[default]
    DetailOnly,
}

/// `||W x||_1` restricted to the penalized coefficients.
pub fn wavelet_l1(x: &Array2<f64>, dwt: &Dwt2, which: Penalized) -> f64 {
    let c = dwt.forward(x);
    c.indexed_iter()
        .filter(|&((i, j), _)| which == Penalized::All || dwt.is_detail(i, j))
        .map(|(_, v)| v.abs())
        .sum()
}

/// Proximal map of `t * ||W x||_1`: transform, soft-threshold, invert.
pub fn prox_wavelet_l1(x: &Array2<f64>, t: f64, dwt: &Dwt2, which: Penalized) -> Array2<f64> {
    if t == 0.0 {
        return x.clone();
    }
    let mut c = dwt.forward(x);
    for ((i, j), v) in c.indexed_iter_mut() {
        if which == Penalized::All || dwt.is_detail(i, j) {
            *v = soft_threshold(*v, t);
        }
    }
    dwt.inverse(&c)
}
