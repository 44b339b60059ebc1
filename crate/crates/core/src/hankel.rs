//! Block-Hankel lifting of multishot k-space and the rank-k hard-threshold
//! projection.
//!
//! Only interior (valid) `r x r` windows are used. Row `p * (n2 - r + 1) + q`
//! of the lift holds the window whose top-left corner is `(p, q)`; column
//! `s * r * r + a * r + b` holds sample `(p + a, q + b)` of shot `s`.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::C64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HankelGeometry {
    pub shots: usize,
    pub n1: usize,
    pub n2: usize,
    pub r: usize,
}

impl HankelGeometry {
    pub fn new(shots: usize, n1: usize, n2: usize, r: usize) -> Result<Self> {
        if r == 0 || r > n1.min(n2) {
            return Err(Error::InvalidParameter(format!(
                "window size r={r} does not fit a {n1}x{n2} grid"
            )));
        }
        if shots == 0 {
            return Err(Error::InvalidParameter("hankel lift needs at least one shot".into()));
        }
        Ok(HankelGeometry { shots, n1, n2, r })
    }

    pub fn rows(&self) -> usize {
        (self.n1 - self.r + 1) * (self.n2 - self.r + 1)
    }

    pub fn cols(&self) -> usize {
        self.shots * self.r * self.r
    }

    /// Number of windows covering each k-space location.
    pub fn multiplicity(&self) -> Array2<usize> {
        let count = |i: usize, n: usize| {
            let lo = i.saturating_sub(self.r - 1);
            let hi = i.min(n - self.r);
            hi + 1 - lo
        };
        Array2::from_shape_fn((self.n1, self.n2), |(i, j)| count(i, self.n1) * count(j, self.n2))
    }
}

#[derive(Debug, Clone)]
pub struct HankelMatrix {
    geometry: HankelGeometry,
    /// row-major `rows x cols`
    data: Vec<C64>,
}

impl HankelMatrix {
    pub fn geometry(&self) -> HankelGeometry {
        self.geometry
    }

    pub fn rows(&self) -> usize {
        self.geometry.rows()
    }

    pub fn cols(&self) -> usize {
        self.geometry.cols()
    }

    pub fn get(&self, row: usize, col: usize) -> C64 {
        self.data[row * self.cols() + col]
    }

    pub fn row(&self, row: usize) -> &[C64] {
        let c = self.cols();
        &self.data[row * c..(row + 1) * c]
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    /// Replace the entries, keeping the geometry.
    pub fn from_raw(geometry: HankelGeometry, data: Vec<C64>) -> Result<Self> {
        if data.len() != geometry.rows() * geometry.cols() {
            return Err(Error::shape(
                "hankel matrix",
                &[geometry.rows(), geometry.cols()],
                &[data.len()],
            ));
        }
        Ok(HankelMatrix { geometry, data })
    }

    pub fn to_dmatrix(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.rows(), self.cols(), &self.data)
    }
}

/// Lift multishot k-space `(shots, n1, n2)` into its block-Hankel matrix.
pub fn hankel_forward(x: &Array3<C64>, r: usize) -> Result<HankelMatrix> {
    let (shots, n1, n2) = x.dim();
    let geometry = HankelGeometry::new(shots, n1, n2, r)?;
    let (wr, wc) = (n1 - r + 1, n2 - r + 1);
    let cols = geometry.cols();
    let mut data = vec![C64::new(0.0, 0.0); geometry.rows() * cols];
    for p in 0..wr {
        for q in 0..wc {
            let row = &mut data[(p * wc + q) * cols..(p * wc + q + 1) * cols];
            let mut col = 0;
            for s in 0..shots {
                for a in 0..r {
                    for b in 0..r {
                        row[col] = x[[s, p + a, q + b]];
                        col += 1;
                    }
                }
            }
        }
    }
    Ok(HankelMatrix { geometry, data })
}

/// Scatter-add a row-major `rows x cols` buffer back into k-space.
fn scatter(geometry: HankelGeometry, data: &[C64]) -> Array3<C64> {
    let HankelGeometry { shots, n1, n2, r } = geometry;
    let (wr, wc) = (n1 - r + 1, n2 - r + 1);
    let cols = geometry.cols();
    let mut out = Array3::zeros((shots, n1, n2));
    for p in 0..wr {
        for q in 0..wc {
            let row = &data[(p * wc + q) * cols..(p * wc + q + 1) * cols];
            let mut col = 0;
            for s in 0..shots {
                for a in 0..r {
                    for b in 0..r {
                        out[[s, p + a, q + b]] += row[col];
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// True adjoint: every k-space location receives the sum of the matrix
/// entries that map to it.
pub fn hankel_adjoint(h: &HankelMatrix) -> Array3<C64> {
    scatter(h.geometry, &h.data)
}

/// Adjoint divided by window multiplicity, i.e. the average of all copies.
pub fn hankel_adjoint_normalized(h: &HankelMatrix) -> Array3<C64> {
    let mut out = hankel_adjoint(h);
    normalize(&mut out, &h.geometry);
    out
}

fn normalize(out: &mut Array3<C64>, geometry: &HankelGeometry) {
    let mult = geometry.multiplicity();
    for mut shot in out.outer_iter_mut() {
        ndarray::Zip::from(&mut shot)
            .and(&mult)
            .for_each(|z, &m| *z /= m as f64);
    }
}

/// `k = round(n_eff * r^2)`, halves rounding up, never below 1.
pub fn rank_from_neff(r: usize, n_eff: f64) -> usize {
    let k = (n_eff * (r * r) as f64 + 0.5).floor();
    if k < 1.0 {
        1
    } else {
        k as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankBudget {
    /// window size
    pub r: usize,
    /// effective number of shots
    pub n_eff: f64,
}

impl RankBudget {
    pub fn new(r: usize, n_eff: f64) -> Result<Self> {
        if r == 0 {
            return Err(Error::InvalidParameter("window size r must be positive".into()));
        }
        if !(n_eff > 0.0) || !n_eff.is_finite() {
            return Err(Error::InvalidParameter(format!("N_eff must be positive, got {n_eff}")));
        }
        Ok(RankBudget { r, n_eff })
    }

    /// Retained singular values for a given lift, clamped to its size.
    pub fn k(&self, geometry: &HankelGeometry) -> usize {
        rank_from_neff(self.r, self.n_eff).clamp(1, geometry.rows().min(geometry.cols()))
    }

    /// True when the projection keeps every singular value.
    pub fn is_identity(&self, geometry: &HankelGeometry) -> bool {
        self.k(geometry) >= geometry.rows().min(geometry.cols())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvdMethod {
    /// Gram path when the lift is tall, dense SVD otherwise.
    #[default]
    Auto,
    Dense,
    Gram,
}

/// Leading right singular vectors `V_k` (`cols x k`) of the lift.
fn leading_right_vectors(h: &HankelMatrix, k: usize, method: SvdMethod) -> Result<DMatrix<C64>> {
    let (rows, cols) = (h.rows(), h.cols());
    let use_gram = match method {
        SvdMethod::Gram => true,
        SvdMethod::Dense => false,
        SvdMethod::Auto => rows >= 4 * cols,
    };
    if use_gram {
        let gram = gram_matrix(h);
        let eig = nalgebra::SymmetricEigen::try_new(gram, 1e-14, 10_000)
            .ok_or_else(|| Error::Svd("Gram eigendecomposition did not converge".into()))?;
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut v = DMatrix::zeros(cols, k);
        for (dst, &src) in order.iter().take(k).enumerate() {
            v.set_column(dst, &eig.eigenvectors.column(src));
        }
        Ok(v)
    } else {
        let svd = nalgebra::SVD::try_new(h.to_dmatrix(), false, true, 1e-14, 10_000)
            .ok_or_else(|| Error::Svd("dense SVD did not converge".into()))?;
        let v_t = svd
            .v_t
            .ok_or_else(|| Error::Svd("dense SVD returned no right vectors".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut v = DMatrix::zeros(cols, k);
        for (dst, &src) in order.iter().take(k).enumerate() {
            for c in 0..cols {
                v[(c, dst)] = v_t[(src, c)].conj();
            }
        }
        Ok(v)
    }
}

/// `H^H H`, accumulated row by row.
fn gram_matrix(h: &HankelMatrix) -> DMatrix<C64> {
    let cols = h.cols();
    let mut g = vec![C64::new(0.0, 0.0); cols * cols];
    for row in h.data.chunks_exact(cols) {
        for (a, &ra) in row.iter().enumerate() {
            let ca = ra.conj();
            let g_row = &mut g[a * cols..(a + 1) * cols];
            for (gb, &rb) in g_row.iter_mut().zip(row) {
                *gb += ca * rb;
            }
        }
    }
    DMatrix::from_row_slice(cols, cols, &g)
}

/// Hard-thresholded SVD projection of multishot k-space: lift, keep the `k`
/// largest singular values, and average the copies back into k-space.
pub fn lowrank_project(x: &Array3<C64>, budget: &RankBudget, method: SvdMethod) -> Result<Array3<C64>> {
    let (shots, n1, n2) = x.dim();
    let geometry = HankelGeometry::new(shots, n1, n2, budget.r)?;
    let k = budget.k(&geometry);
    if budget.is_identity(&geometry) {
        return Ok(x.clone());
    }
    let h = hankel_forward(x, budget.r)?;
    if h.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite {
            context: "hankel lift".into(),
        });
    }
    let v = leading_right_vectors(&h, k, method)?;
    // H_k = H V_k V_k^H, one row at a time
    let cols = h.cols();
    let projector = &v * v.adjoint();
    let p: Vec<C64> = (0..cols * cols).map(|i| projector[(i / cols, i % cols)]).collect();
    let mut low = vec![C64::new(0.0, 0.0); h.data.len()];
    for (src, dst) in h.data.chunks_exact(cols).zip(low.chunks_exact_mut(cols)) {
        for (a, &ha) in src.iter().enumerate() {
            if ha == C64::new(0.0, 0.0) {
                continue;
            }
            let p_row = &p[a * cols..(a + 1) * cols];
            for (d, &pv) in dst.iter_mut().zip(p_row) {
                *d += ha * pv;
            }
        }
    }
    let mut out = scatter(geometry, &low);
    normalize(&mut out, &geometry);
    Ok(out)
}

/// Singular values of the lift, descending.
pub fn singular_values(x: &Array3<C64>, r: usize) -> Result<Vec<f64>> {
    let h = hankel_forward(x, r)?;
    let svd = nalgebra::SVD::try_new(h.to_dmatrix(), false, false, 1e-14, 10_000)
        .ok_or_else(|| Error::Svd("dense SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn nuclear_norm(x: &Array3<C64>, r: usize) -> Result<f64> {
    Ok(singular_values(x, r)?.iter().sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::inner;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random3(s: usize, n1: usize, n2: usize, rng: &mut ChaCha8Rng) -> Array3<C64> {
        Array3::from_shape_fn((s, n1, n2), |_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    #[test]
    fn protocol_rank_budgets() {
        assert_eq!(rank_from_neff(6, 1.25), 45);
        assert_eq!(rank_from_neff(5, 1.0), 25);
        assert_eq!(rank_from_neff(7, 1.25), 61);
        assert_eq!(rank_from_neff(2, 0.1), 1);
        // 0.625 * 4 = 2.5 rounds up
        assert_eq!(rank_from_neff(2, 0.625), 3);
    }

    #[test]
    fn budget_clamps_to_lift() {
        let g = HankelGeometry::new(2, 4, 4, 3).unwrap();
        assert_eq!(g.rows(), 4);
        assert_eq!(g.cols(), 18);
        assert_eq!(RankBudget::new(3, 2.0).unwrap().k(&g), 4);
        assert!(RankBudget::new(3, 0.0).is_err());
        assert!(RankBudget::new(0, 1.0).is_err());
    }

    #[test]
    fn single_window_lift_is_the_vectorized_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random3(2, 3, 3, &mut rng);
        let h = hankel_forward(&x, 3).unwrap();
        assert_eq!((h.rows(), h.cols()), (1, 18));
        let flat: Vec<C64> = x.iter().cloned().collect();
        assert_eq!(h.row(0), &flat[..]);
    }

    #[test]
    fn constant_kspace_gives_constant_lift() {
        let x = Array3::from_elem((2, 5, 6), C64::new(0.5, -2.0));
        let h = hankel_forward(&x, 3).unwrap();
        assert!(h.as_slice().iter().all(|&z| z == C64::new(0.5, -2.0)));
    }

    #[test]
    fn matches_index_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random3(2, 5, 5, &mut rng);
        let h = hankel_forward(&x, 2).unwrap();
        assert_eq!((h.rows(), h.cols()), (16, 8));
        // handwritten enumeration: windows scanned row-major, within each
        // window shot-major then row-major
        let mut row = 0;
        for p in 0..4 {
            for q in 0..4 {
                let expected = [
                    x[[0, p, q]], x[[0, p, q + 1]], x[[0, p + 1, q]], x[[0, p + 1, q + 1]],
                    x[[1, p, q]], x[[1, p, q + 1]], x[[1, p + 1, q]], x[[1, p + 1, q + 1]],
                ];
                assert_eq!(h.row(row), &expected);
                row += 1;
            }
        }
        // adjoint oracle: count copies by brute force
        let adj = hankel_adjoint(&h);
        for s in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    let mut n = 0.0;
                    for p in 0..4 {
                        for q in 0..4 {
                            if (p..p + 2).contains(&i) && (q..q + 2).contains(&j) {
                                n += 1.0;
                            }
                        }
                    }
                    assert!((adj[[s, i, j]] - x[[s, i, j]] * n).norm() < 1e-14);
                    assert_eq!(h.geometry().multiplicity()[[i, j]] as f64, n);
                }
            }
        }
    }

    #[test]
    fn adjoint_identity_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = rng.random_range(1..4);
            let n1 = rng.random_range(2..9);
            let n2 = rng.random_range(2..9);
            let r = rng.random_range(1..=n1.min(n2));
            let x = random3(s, n1, n2, &mut rng);
            let h = hankel_forward(&x, r).unwrap();
            let y = HankelMatrix::from_raw(
                h.geometry(),
                (0..h.rows() * h.cols())
                    .map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                    .collect(),
            )
            .unwrap();
            let lhs: C64 = h.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a.conj() * b).sum();
            let rhs = inner(&x, &hankel_adjoint(&y));
            assert!((lhs - rhs).norm() < 1e-10);
        }
    }

    #[test]
    fn normalized_adjoint_inverts_lift() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random3(3, 7, 6, &mut rng);
        let back = hankel_adjoint_normalized(&hankel_forward(&x, 3).unwrap());
        assert!((back - &x).iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn window_too_large() {
        assert!(hankel_forward(&Array3::zeros((1, 4, 5)), 5).is_err());
        assert!(hankel_forward(&Array3::zeros((1, 4, 5)), 0).is_err());
    }

    #[test]
    fn full_budget_keeps_everything() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random3(2, 8, 8, &mut rng);
        let out = lowrank_project(&x, &RankBudget::new(3, 2.0).unwrap(), SvdMethod::Auto).unwrap();
        assert!((out - &x).iter().all(|z| z.norm() < 1e-10));
    }

    #[test]
    fn rank_one_lift_is_a_fixed_point() {
        let mut x = Array3::zeros((2, 8, 8));
        x.index_axis_mut(ndarray::Axis(0), 0).fill(C64::new(1.0, 0.5));
        x.index_axis_mut(ndarray::Axis(0), 1).fill(C64::new(-0.3, 2.0));
        for method in [SvdMethod::Dense, SvdMethod::Gram] {
            let out = lowrank_project(&x, &RankBudget::new(3, 1.0 / 9.0).unwrap(), method).unwrap();
            assert!((out - &x).iter().all(|z| z.norm() < 1e-10));
        }
    }

    #[test]
    fn duplicated_shots_have_at_most_r2_singular_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let one = random3(1, 9, 9, &mut rng);
        let mut x = Array3::zeros((3, 9, 9));
        for mut s in x.outer_iter_mut() {
            s.assign(&one.index_axis(ndarray::Axis(0), 0));
        }
        let sv = singular_values(&x, 3).unwrap();
        let tol = 1e-10 * sv[0];
        assert!(sv.iter().filter(|&&v| v > tol).count() <= 9);
    }
}
