use super::kalman::FilterOutput;
use crate::error::{Error, Result};
use crate::gaussmath::{symmetrize_mut, Cholesky, Matrix, Vector};
use crate::ssm::StateSpaceModel;

#[derive(Debug, Clone, PartialEq)]
pub struct SmootherOutput {
    /// `x̂_{t|T}`.
    pub means: Vec<Vector>,
    /// `Σ_{t|T}`.
    pub covs: Vec<Matrix>,
    /// Backward gains for `t = 1..T-1` (none for the last step).
    pub backward_gains: Option<Vec<Matrix>>,
}

/// Rauch–Tung–Striebel backward pass over a forward KF/EKF run.
///
/// The one-step predictions are recomputed from the model, linearized at
/// the filtered means.
pub fn rts_smooth<M: StateSpaceModel + ?Sized>(model: &M, forward: &FilterOutput) -> Result<SmootherOutput> {
    let t_len = forward.len();
    if t_len == 0 || forward.covs.len() != t_len {
        return Err(Error::InvalidArgument("forward pass is empty or inconsistent".into()));
    }
    let mut means = forward.means.clone();
    let mut covs = forward.covs.clone();
    let mut gains = vec![Matrix::zeros(0, 0); t_len - 1];
    for t in (0..t_len - 1).rev() {
        let f = model.transition_jacobian(&forward.means[t]);
        let pred_mean = model.transition(&forward.means[t]);
        let mut pred_cov = &f * &forward.covs[t] * f.transpose() + model.process_cov();
        symmetrize_mut(&mut pred_cov);
        let chol = Cholesky::new(&pred_cov).map_err(|_| Error::NotPositiveDefinite {
            context: "smoother predicted covariance",
        })?;
        // G = Σ_{t|t} Fᵀ Σ_{t+1|t}⁻¹
        let gain = chol.solve(&(&f * &forward.covs[t])).transpose();
        means[t] = &forward.means[t] + &gain * (&means[t + 1] - pred_mean);
        let mut cov = &forward.covs[t] - &gain * (pred_cov - &covs[t + 1]) * gain.transpose();
        symmetrize_mut(&mut cov);
        covs[t] = cov;
        gains[t] = gain;
    }
    Ok(SmootherOutput {
        means,
        covs,
        backward_gains: Some(gains),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::kf_filter;
    use crate::gaussmath::Gaussian;
    use crate::ssm::{simulate, LinearModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_step_equals_filter() {
        let model = LinearModel::scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        let fwd = kf_filter(&model, &[Vector::from_element(1, 0.7)]).unwrap();
        let sm = rts_smooth(&model, &fwd).unwrap();
        assert_eq!(sm.means, fwd.means);
        assert_eq!(sm.covs, fwd.covs);
    }

    #[test]
    fn noiseless_dynamics_are_respected() {
        let f = Matrix::from_row_slice(2, 2, &[0.99, 0.1, -0.1, 0.99]);
        let model = LinearModel::new(
            f.clone(),
            Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
            Matrix::zeros(2, 2),
            Matrix::from_element(1, 1, 0.5),
            Gaussian::new(Vector::from_vec(vec![1.0, -1.0]), Matrix::identity(2, 2) * 4.0).unwrap(),
        )
        .unwrap();
        let tr = simulate(&model, 40, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        let sm = rts_smooth(&model, &kf_filter(&model, &tr.obs).unwrap()).unwrap();
        for t in 0..39 {
            let pred = &f * &sm.means[t];
            assert!((pred - &sm.means[t + 1]).amax() < 1e-10);
        }
    }
}
