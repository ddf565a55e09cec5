//! Dense small-matrix helpers and multivariate Gaussian primitives.
//!
//! Everything is `f64`. Covariances are symmetrized after arithmetic updates
//! and inverted only through Cholesky solves.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Jitter added to the diagonal before factorizing a covariance.
pub const PSD_JITTER: f64 = 1e-12;

/// Relative asymmetry tolerated in a covariance matrix.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

pub fn symmetrize_mut(a: &mut Matrix) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

pub fn is_symmetric(a: &Matrix, rel_tol: f64) -> bool {
    if !a.is_square() {
        return false;
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > rel_tol * scale {
                return false;
            }
        }
    }
    true
}

pub fn all_finite(a: &Matrix) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Lower Cholesky factor `L` with `L Lᵀ = a`.
///
/// Only the lower triangle of `a` is read. Fails with `NotPositiveDefinite`
/// as soon as a pivot is not strictly positive.
pub fn cholesky_factor(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "cholesky of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let mut l = a.clone();
    for j0 in (0..n).step_by(BLOCK) {
        let j1 = (j0 + BLOCK).min(n);
        if j0 > 0 {
            // Panel update from the finished columns in one matrix product.
            let (left, mut right) = l.columns_range_pair_mut(0..j0, j0..j1);
            let top = left.rows(j0, j1 - j0).transpose();
            right.rows_mut(j0, n - j0).gemm(-1.0, &left.rows(j0, n - j0), &top, 1.0);
        }
        let data = l.as_mut_slice();
        for j in j0..j1 {
            let (done, rest) = data.split_at_mut(j * n);
            let col_j = &mut rest[..n];
            for k in j0..j {
                let col_k = &done[k * n..(k + 1) * n];
                let ljk = col_k[j];
                if ljk != 0.0 {
                    for (a, b) in col_j[j..].iter_mut().zip(&col_k[j..]) {
                        *a -= b * ljk;
                    }
                }
            }
            let pivot = col_j[j];
            if !(pivot > 0.0) || !pivot.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    context: "cholesky pivot",
                });
            }
            let d = pivot.sqrt();
            col_j[j] = d;
            for v in &mut col_j[j + 1..] {
                *v /= d;
            }
            col_j[..j].fill(0.0);
        }
    }
    Ok(l)
}

/// Square root `L` (lower triangular, `L Lᵀ = a`) of a positive
/// *semi*-definite matrix. Pivots that vanish up to round-off produce zero
/// columns instead of failing, so a zero covariance yields `L = 0`.
pub fn psd_sqrt(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "square root of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(1.0_f64, f64::max);
    let tol = 1e-12 * scale;
    let mut l = a.clone();
    for j in 0..n {
        for k in 0..j {
            let ljk = l[(j, k)];
            if ljk != 0.0 {
                for i in j..n {
                    l[(i, j)] -= l[(i, k)] * ljk;
                }
            }
        }
        let pivot = l[(j, j)];
        if !pivot.is_finite() || pivot < -tol {
            return Err(Error::NotPositiveDefinite {
                context: "covariance square root",
            });
        }
        for i in 0..j {
            l[(i, j)] = 0.0;
        }
        if pivot <= tol {
            for i in j..n {
                l[(i, j)] = 0.0;
            }
            continue;
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            l[(i, j)] /= d;
        }
    }
    Ok(l)
}

/// Block size of the factorization and triangular solves.
const BLOCK: usize = 48;

/// A Cholesky factorization kept around for repeated solves.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn new(a: &Matrix) -> Result<Self> {
        Ok(Self {
            l: cholesky_factor(a)?,
        })
    }

    /// Factorizes `a + PSD_JITTER·I`.
    pub fn with_jitter(a: &Matrix) -> Result<Self> {
        let mut a = a.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += PSD_JITTER;
        }
        Self::new(&a)
    }

    pub fn l(&self) -> &Matrix {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Overwrites each column `b` with `L⁻¹ b`.
    pub fn solve_lower_mut(&self, b: &mut Matrix) {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let l = self.l.as_slice();
        for r0 in (0..n).step_by(BLOCK) {
            let r1 = (r0 + BLOCK).min(n);
            if r0 > 0 {
                let (done, mut cur) = b.rows_range_pair_mut(0..r0, r0..r1);
                cur.gemm(-1.0, &self.l.view((r0, 0), (r1 - r0, r0)), &done, 1.0);
            }
            for col in b.as_mut_slice().chunks_exact_mut(n) {
                for k in r0..r1 {
                    let lk = &l[k * n..(k + 1) * n];
                    let xk = col[k] / lk[k];
                    col[k] = xk;
                    if xk != 0.0 {
                        for (c, v) in col[k + 1..r1].iter_mut().zip(&lk[k + 1..r1]) {
                            *c -= v * xk;
                        }
                    }
                }
            }
        }
    }

    /// Overwrites each column `b` with `L⁻ᵀ b`.
    pub fn solve_upper_mut(&self, b: &mut Matrix) {
        let n = self.dim();
        assert_eq!(b.nrows(), n);
        let l = self.l.as_slice();
        for col in b.as_mut_slice().chunks_exact_mut(n.max(1)) {
            for k in (0..n).rev() {
                let lk = &l[k * n..(k + 1) * n];
                let dot: f64 = col[k + 1..].iter().zip(&lk[k + 1..]).map(|(c, v)| c * v).sum();
                col[k] = (col[k] - dot) / lk[k];
            }
        }
    }

    /// `A⁻¹ B`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let mut x = b.clone();
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        x
    }

    /// `A⁻¹ b`.
    pub fn solve_vec(&self, b: &Vector) -> Vector {
        let mut x = Matrix::from_column_slice(b.len(), 1, b.as_slice());
        self.solve_lower_mut(&mut x);
        self.solve_upper_mut(&mut x);
        Vector::from_column_slice(x.as_slice())
    }

    /// `bᵀ A⁻¹ b`, computed as `‖L⁻¹ b‖²`.
    pub fn quad_form(&self, b: &Vector) -> f64 {
        let mut x = Matrix::from_column_slice(b.len(), 1, b.as_slice());
        self.solve_lower_mut(&mut x);
        x.norm_squared()
    }
}

/// Multivariate normal belief `N(mean, cov)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vector,
    pub cov: Matrix,
}

impl Gaussian {
    /// Validates dimensions, finiteness, symmetry and positive
    /// semi-definiteness (`cov + 1e-12·I` must factorize).
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "mean has {n} entries but covariance is {}x{}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !mean.iter().all(|v| v.is_finite()) || !all_finite(&cov) {
            return Err(Error::InvalidArgument(
                "Gaussian with non-finite entries".into(),
            ));
        }
        if !is_symmetric(&cov, SYMMETRY_TOL) {
            return Err(Error::InvalidArgument(
                "covariance is not symmetric".into(),
            ));
        }
        Cholesky::with_jitter(&cov)?;
        Ok(Self { mean, cov })
    }

    /// Standard normal in `n` dimensions.
    pub fn standard(n: usize) -> Self {
        Self {
            mean: Vector::zeros(n),
            cov: Matrix::identity(n, n),
        }
    }

    pub fn isotropic(mean: Vector, variance: f64) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: Matrix::identity(n, n) * variance,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// `ln N(x; μ, Σ)` through a Cholesky factorization of `Σ`.
pub fn log_pdf(g: &Gaussian, x: &Vector) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(Error::ShapeMismatch(format!(
            "log_pdf point has {} entries, Gaussian has {}",
            x.len(),
            g.dim()
        )));
    }
    let chol = Cholesky::new(&g.cov)?;
    let diff = x - &g.mean;
    let n = g.dim() as f64;
    Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + chol.quad_form(&diff)))
}

/// Draws `μ + L z` with `z` standard normal and `L Lᵀ = Σ`.
pub fn sample_gaussian<R: Rng + ?Sized>(g: &Gaussian, rng: &mut R) -> Result<Vector> {
    let l = psd_sqrt(&g.cov)?;
    Ok(sample_with_sqrt(&g.mean, &l, rng))
}

/// Same as [`sample_gaussian`] with a precomputed square root.
pub fn sample_with_sqrt<R: Rng + ?Sized>(mean: &Vector, sqrt: &Matrix, rng: &mut R) -> Vector {
    let z = Vector::from_iterator(mean.len(), (0..mean.len()).map(|_| rng.sample(StandardNormal)));
    mean + sqrt * z
}

/// Standard-normal vector of length `n`.
pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.sample(StandardNormal)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn cholesky_identity() {
        let l = cholesky_factor(&Matrix::identity(2, 2)).unwrap();
        assert_eq!(l, Matrix::identity(2, 2));
    }

    #[test]
    fn cholesky_two_by_two() {
        let a = mat(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let l = cholesky_factor(&a).unwrap();
        let expected = mat(2, 2, &[2.0, 0.0, 1.0, 2f64.sqrt()]);
        assert!((&l - expected).amax() < 1e-15);
        assert!((&l * l.transpose() - a).amax() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = mat(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            cholesky_factor(&a),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn log_pdf_values() {
        let g = Gaussian::standard(1);
        let v = log_pdf(&g, &Vector::from_vec(vec![0.0])).unwrap();
        assert!((v - (-0.918_938_533_204_672_7)).abs() < 1e-12);

        let g = Gaussian::standard(2);
        let v = log_pdf(&g, &Vector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!((v - (-(2.0 * std::f64::consts::PI).ln() - 1.0)).abs() < 1e-12);

        // N(0, 4) at x = 2: (1/sqrt(8π)) exp(-4/8).
        let g = Gaussian::isotropic(Vector::zeros(1), 4.0);
        let v = log_pdf(&g, &Vector::from_vec(vec![2.0])).unwrap();
        let by_hand = (1.0 / (8.0 * std::f64::consts::PI).sqrt() * (-0.5f64).exp()).ln();
        assert!((v - by_hand).abs() < 1e-12);
    }

    #[test]
    fn log_pdf_singular_is_an_error() {
        let g = Gaussian {
            mean: Vector::zeros(2),
            cov: Matrix::zeros(2, 2),
        };
        assert!(log_pdf(&g, &Vector::zeros(2)).is_err());
    }

    #[test]
    fn density_integrates_to_one() {
        let sigma = 1.7;
        let g = Gaussian::isotropic(Vector::from_vec(vec![0.3]), sigma * sigma);
        let n = 20_000;
        let (lo, hi) = (0.3 - 8.0 * sigma, 0.3 + 8.0 * sigma);
        let h = (hi - lo) / n as f64;
        let total: f64 = (0..=n)
            .map(|i| {
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let x = lo + i as f64 * h;
                w * log_pdf(&g, &Vector::from_vec(vec![x])).unwrap().exp()
            })
            .sum::<f64>()
            * h;
        assert!((total - 1.0).abs() < 1e-4, "integral {total}");
    }

    #[test]
    fn zero_covariance_sample_is_the_mean() {
        let g = Gaussian {
            mean: Vector::from_vec(vec![1.0, -2.0, 3.5]),
            cov: Matrix::zeros(3, 3),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(sample_gaussian(&g, &mut rng).unwrap(), g.mean);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let g = Gaussian::new(
            Vector::from_vec(vec![0.5, 1.0]),
            mat(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let a = sample_gaussian(&g, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = sample_gaussian(&g, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_sample_moments() {
        let g = Gaussian::standard(1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_gaussian(&g, &mut rng).unwrap()[0])
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn sample_covariance_matches() {
        let cov = mat(3, 3, &[2.0, 0.5, -0.3, 0.5, 1.0, 0.2, -0.3, 0.2, 0.8]);
        let g = Gaussian::new(Vector::from_vec(vec![1.0, 2.0, 3.0]), cov.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 100_000;
        let draws: Vec<Vector> = (0..n).map(|_| sample_gaussian(&g, &mut rng).unwrap()).collect();
        let mean = draws.iter().fold(Vector::zeros(3), |a, d| a + d) / n as f64;
        let emp = draws
            .iter()
            .fold(Matrix::zeros(3, 3), |a, d| a + (d - &mean) * (d - &mean).transpose())
            / (n - 1) as f64;
        let rel = (emp - &cov).norm() / cov.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn cholesky_solves() {
        let a = mat(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let chol = Cholesky::new(&a).unwrap();
        let b = Vector::from_vec(vec![1.0, -1.0, 2.0]);
        let x = chol.solve_vec(&b);
        assert!((&a * &x - &b).amax() < 1e-13);
        let q = chol.quad_form(&b);
        assert!((q - b.dot(&x)).abs() < 1e-13);
        let lu_det = a.clone().determinant().ln();
        assert!((chol.log_det() - lu_det).abs() < 1e-12);
    }

    #[test]
    fn psd_sqrt_of_rank_deficient() {
        let v = Vector::from_vec(vec![1.0, 2.0, -1.0]);
        let a = &v * v.transpose();
        let l = psd_sqrt(&a).unwrap();
        assert!((&l * l.transpose() - &a).amax() < 1e-12);
        assert!(psd_sqrt(&(-a)).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cholesky_reconstructs_spd(entries in prop::collection::vec(-3.0f64..3.0, 16)) {
                let b = Matrix::from_row_slice(4, 4, &entries);
                let a = b.transpose() * &b + Matrix::identity(4, 4);
                let l = cholesky_factor(&a).unwrap();
                let rel = (&l * l.transpose() - &a).norm() / a.norm();
                prop_assert!(rel < 1e-10);
                for i in 0..4 {
                    for j in (i + 1)..4 {
                        prop_assert_eq!(l[(i, j)], 0.0);
                    }
                }
            }
        }
    }
}
