use crate::error::{Error, Result};
use crate::gaussmath::{symmetrize, Cholesky, Matrix};

/// Recovers `(Σ_{t|t-1}, Σ_t)` from a gain: `Σ_{t|t-1} = (I - K H)⁻¹ K R H (HᵀH)⁻¹`
/// and `Σ_t = (I - K H) Σ_{t|t-1}`, both symmetrized.
pub fn extract_uncertainty(k: &Matrix, h: &Matrix, r: &Matrix) -> Result<(Matrix, Matrix)> {
    let (m, n) = (k.nrows(), k.ncols());
    if h.nrows() != n || h.ncols() != m || r.nrows() != n || r.ncols() != n {
        return Err(Error::ShapeMismatch(format!(
            "gain {m}x{n}, H {}x{}, R {}x{}",
            h.nrows(),
            h.ncols(),
            r.nrows(),
            r.ncols()
        )));
    }
    let hth = h.transpose() * h;
    let hth_chol = Cholesky::new(&hth).map_err(|_| Error::RankDeficientH)?;
    // Relative pivot test: a numerically singular HᵀH passes Cholesky with
    // a tiny pivot but yields garbage.
    let diag = hth_chol.l().diagonal();
    if diag.min() <= 1e-10 * diag.max() {
        return Err(Error::RankDeficientH);
    }
    let i_kh = Matrix::identity(m, m) - k * h;
    let lu = i_kh.clone().lu();
    let u_diag = lu.u().diagonal().abs();
    if u_diag.min() <= 1e-12 * u_diag.max().max(1.0) {
        return Err(Error::SingularUpdate);
    }
    // (HᵀH)⁻¹ is symmetric, so right-multiplying by it is a transposed solve.
    let krh = k * r * h;
    let right = hth_chol.solve(&krh.transpose()).transpose();
    let prior = lu.solve(&right).ok_or(Error::SingularUpdate)?;
    let prior = symmetrize(&prior);
    let post = symmetrize(&(&i_kh * &prior));
    Ok((prior, post))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::kf_filter;
    use crate::gaussmath::{Gaussian, Vector};
    use crate::ssm::{simulate, LinearModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn recovers_kf_covariances() {
        let model = LinearModel::new(
            Matrix::from_row_slice(2, 2, &[0.9, 0.3, -0.2, 0.8]),
            Matrix::from_row_slice(3, 2, &[1.0, 0.0, 0.5, 1.0, -0.3, 0.2]),
            Matrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]),
            Matrix::from_row_slice(3, 3, &[0.8, 0.1, 0.0, 0.1, 0.6, 0.05, 0.0, 0.05, 1.2]),
            Gaussian::new(Vector::zeros(2), Matrix::identity(2, 2) * 3.0).unwrap(),
        )
        .unwrap();
        let tr = simulate(&model, 15, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let kf = kf_filter(&model, &tr.obs).unwrap();
        for t in 0..15 {
            let k = &kf.gains.as_ref().unwrap()[t];
            let (prior, post) = extract_uncertainty(k, &model.h, &model.r).unwrap();
            assert!((prior - &kf.prior_covs.as_ref().unwrap()[t]).amax() < 1e-8);
            assert!((post - &kf.covs[t]).amax() < 1e-8);
        }
    }

    #[test]
    fn zero_gain_gives_zero_prior() {
        let (prior, post) =
            extract_uncertainty(&Matrix::zeros(2, 2), &Matrix::identity(2, 2), &Matrix::identity(2, 2)).unwrap();
        assert_eq!(prior, Matrix::zeros(2, 2));
        assert_eq!(post, Matrix::zeros(2, 2));
    }

    #[test]
    fn rank_deficient_observation() {
        let k = Matrix::from_element(2, 1, 0.3);
        let h = Matrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert!(matches!(
            extract_uncertainty(&k, &h, &Matrix::identity(1, 1)),
            Err(Error::RankDeficientH)
        ));
    }

    #[test]
    fn singular_update() {
        let k = Matrix::identity(2, 2);
        let h = Matrix::identity(2, 2);
        assert!(matches!(
            extract_uncertainty(&k, &h, &Matrix::identity(2, 2)),
            Err(Error::SingularUpdate)
        ));
    }
}
