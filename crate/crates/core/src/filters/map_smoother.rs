use crate::error::{Error, Result};
use crate::gaussmath::{symmetrize, Cholesky, Matrix, Vector};
use crate::ssm::{LinearModel, StateSpaceModel};

pub const DEFAULT_MAP_STEP: f64 = 1e-3;
pub const DEFAULT_MAP_ITERS: usize = 200;
const DIVERGENCE_NORM: f64 = 1e9;

/// Gradient ascent on `log p(x_{1:T} | y_{1:T})` for a linear Gaussian model.
///
/// The gradient at `x_t` is the sum of three messages: from the prior
/// through `x_{t-1}`, from the future through `x_{t+1}`, and from `y_t`.
/// For `t = 1` the prior message uses `N(F μ₀, F Σ₀ Fᵀ + Q)`. All indices
/// move together each iteration.
pub fn map_gradient_smoother(model: &LinearModel, obs: &[Vector], iters: usize, step: f64) -> Result<Vec<Vector>> {
    if !(step.is_finite() && step >= 0.0) {
        return Err(Error::InvalidArgument(format!("step size must be >= 0, got {step}")));
    }
    if obs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let n = model.obs_dim();
    if let Some(bad) = obs.iter().find(|y| y.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "observation of length {} for a model with {n} outputs",
            bad.len()
        )));
    }
    let m = model.state_dim();
    let (f, h) = (&model.f, &model.h);
    let precision = |c: &Matrix, context: &'static str| -> Result<Matrix> {
        let chol = Cholesky::new(c).map_err(|_| Error::NotPositiveDefinite { context })?;
        Ok(symmetrize(&chol.solve(&Matrix::identity(c.nrows(), c.nrows()))))
    };
    let q_inv = precision(&model.q, "process noise covariance")?;
    let r_inv = precision(&model.r, "observation noise covariance")?;
    let p1 = f * &model.init.cov * f.transpose() + &model.q;
    let p1_inv = precision(&symmetrize(&p1), "first-step prior covariance")?;
    let m1 = f * &model.init.mean;
    let ft_qinv = f.transpose() * &q_inv;
    let ht_rinv = h.transpose() * &r_inv;

    // x⁰_t = Hᵀ (H Hᵀ)⁻¹ y_t
    let hht = h * h.transpose();
    let hht_chol = Cholesky::new(&hht).map_err(|_| Error::RankDeficientH)?;
    let mut x: Vec<Vector> = obs.iter().map(|y| h.transpose() * hht_chol.solve_vec(y)).collect();
    if step == 0.0 {
        return Ok(x);
    }

    let t_len = x.len();
    let mut grad = vec![Vector::zeros(m); t_len];
    for iteration in 0..iters {
        for t in 0..t_len {
            let mut g = &ht_rinv * (&obs[t] - h * &x[t]);
            if t == 0 {
                g -= &p1_inv * (&x[0] - &m1);
            } else {
                g -= &q_inv * (&x[t] - f * &x[t - 1]);
            }
            if t + 1 < t_len {
                g += &ft_qinv * (&x[t + 1] - f * &x[t]);
            }
            grad[t] = g;
        }
        let mut norm_sq = 0.0;
        for (xt, gt) in x.iter_mut().zip(&grad) {
            xt.axpy(step, gt, 1.0);
            norm_sq += xt.norm_squared();
        }
        let norm = norm_sq.sqrt();
        if !norm.is_finite() || norm > DIVERGENCE_NORM {
            return Err(Error::Diverged { iteration, norm });
        }
    }
    Ok(x)
}

/// Largest step for which plain gradient ascent on the (concave quadratic)
/// log-posterior is guaranteed to converge: `1 / L` with `L` an upper bound
/// on the Hessian norm, assembled from the per-block precision norms.
pub fn map_lipschitz_step(model: &LinearModel) -> Result<f64> {
    let norm2 = |a: &Matrix| a.clone().svd(false, false).singular_values.max();
    let inv_norm = |c: &Matrix| -> Result<f64> {
        let chol = Cholesky::new(c).map_err(|_| Error::NotPositiveDefinite {
            context: "noise covariance",
        })?;
        Ok(norm2(&chol.solve(&Matrix::identity(c.nrows(), c.nrows()))))
    };
    let q = inv_norm(&model.q)?;
    let p1 = inv_norm(&symmetrize(&(&model.f * &model.init.cov * model.f.transpose() + &model.q)))?;
    let r = inv_norm(&model.r)?;
    let fnorm = norm2(&model.f);
    let hnorm = norm2(&model.h);
    let lip = q.max(p1) + hnorm * hnorm * r + (1.0 + fnorm).powi(2) * q;
    Ok(1.0 / lip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::{kf_filter, rts_smooth};
    use crate::gaussmath::Gaussian;
    use crate::ssm::simulate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model2() -> LinearModel {
        LinearModel::new(
            Matrix::from_row_slice(2, 2, &[0.9, 0.2, -0.1, 0.8]),
            Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.3, 1.0]),
            Matrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            Matrix::identity(2, 2) * 0.7,
            Gaussian::new(Vector::from_vec(vec![0.5, -0.5]), Matrix::identity(2, 2)).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_step_returns_initialization() {
        let model = model2();
        let tr = simulate(&model, 10, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = map_gradient_smoother(&model, &tr.obs, 50, 0.0).unwrap();
        let h_inv = model.h.clone().try_inverse().unwrap();
        for (xt, y) in x.iter().zip(&tr.obs) {
            assert!((xt - &h_inv * y).amax() < 1e-12);
        }
    }

    #[test]
    fn converges_to_rts_means() {
        let model = model2();
        let tr = simulate(&model, 25, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let rts = rts_smooth(&model, &kf_filter(&model, &tr.obs).unwrap()).unwrap();
        let step = map_lipschitz_step(&model).unwrap();
        let x = map_gradient_smoother(&model, &tr.obs, 5000, step).unwrap();
        for (a, b) in x.iter().zip(&rts.means) {
            assert!((a - b).amax() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn one_step_closed_form() {
        // prior N(F μ₀, F Σ₀ Fᵀ + Q) = N(1.6, 2.28), observation 0.5 with R = 1.5
        let model = LinearModel::scalar(0.8, 1.0, 1.0, 1.5, 2.0, 2.0).unwrap();
        let prior_var = 0.64 * model.init.cov[(0, 0)] + model.q[(0, 0)];
        let prior_mean = 0.8 * 2.0;
        let r = 1.5;
        let expected = (prior_mean / prior_var + 0.5 / r) / (1.0 / prior_var + 1.0 / r);
        let x = map_gradient_smoother(&model, &[Vector::from_element(1, 0.5)], 2000, 0.3).unwrap();
        assert!((x[0][0] - expected).abs() < 1e-10);
    }

    #[test]
    fn oversized_step_diverges() {
        let model = model2();
        let tr = simulate(&model, 20, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(matches!(
            map_gradient_smoother(&model, &tr.obs, 10_000, 10.0),
            Err(Error::Diverged { .. })
        ));
    }
}
