//! Kalman filter and its extended (linearized) variant.

use crate::error::{Error, Result};
use crate::gaussmath::{symmetrize_mut, Cholesky, Matrix, Vector};
use crate::ssm::{LinearModel, StateSpaceModel};

/// Per-step output of a forward filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    /// Posterior means `x̂_{t|t}`.
    pub means: Vec<Vector>,
    /// Posterior covariances `Σ_{t|t}`.
    pub covs: Vec<Matrix>,
    /// Kalman gains `K_t`, when the filter computes them.
    pub gains: Option<Vec<Matrix>>,
    /// Innovations `y_t - ŷ_{t|t-1}`.
    pub innovations: Option<Vec<Vector>>,
    /// Prior covariances `Σ_{t|t-1}`, when tracked.
    pub prior_covs: Option<Vec<Matrix>>,
}

impl FilterOutput {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }
}

/// Result of one measurement update.
#[derive(Debug, Clone)]
pub struct Update {
    pub mean: Vector,
    pub cov: Matrix,
    pub gain: Matrix,
    pub innovation: Vector,
}

/// Linear(ized) measurement update.
///
/// `S = H Σ Hᵀ + R`, `K = Σ Hᵀ S⁻¹`, `x̂ = x̂⁻ + K (y - ŷ)`, and the Joseph
/// form `(I - K H) Σ (I - K H)ᵀ + K R Kᵀ` for the covariance.
pub fn kalman_update(
    prior_mean: &Vector,
    prior_cov: &Matrix,
    y: &Vector,
    y_pred: &Vector,
    h: &Matrix,
    r: &Matrix,
) -> Result<Update> {
    let m = prior_mean.len();
    if y.len() != h.nrows() || h.ncols() != m || y_pred.len() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "update with {}-dim observation, H {}x{}, state {m}",
            y.len(),
            h.nrows(),
            h.ncols()
        )));
    }
    let ph_t = prior_cov * h.transpose();
    let mut s = h * &ph_t + r;
    symmetrize_mut(&mut s);
    let chol = Cholesky::new(&s).map_err(|_| Error::NotPositiveDefinite {
        context: "innovation covariance",
    })?;
    let gain = chol.solve(&ph_t.transpose()).transpose();
    let innovation = y - y_pred;
    let mean = prior_mean + &gain * &innovation;
    let i_kh = Matrix::identity(m, m) - &gain * h;
    let mut cov = &i_kh * prior_cov * i_kh.transpose() + &gain * r * gain.transpose();
    symmetrize_mut(&mut cov);
    Ok(Update {
        mean,
        cov,
        gain,
        innovation,
    })
}

fn check_obs(obs: &[Vector], n: usize) -> Result<()> {
    if let Some(bad) = obs.iter().find(|y| y.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "observation of length {} for a model with {n} outputs",
            bad.len()
        )));
    }
    Ok(())
}

/// Extended Kalman filter. With a linear model this is exactly the Kalman
/// filter, since the Jacobians are the model matrices.
pub fn ekf_filter<M: StateSpaceModel + ?Sized>(model: &M, obs: &[Vector]) -> Result<FilterOutput> {
    run_filter(model, obs, None)
}

/// Kalman filter for a linear Gaussian model.
pub fn kf_filter(model: &LinearModel, obs: &[Vector]) -> Result<FilterOutput> {
    run_filter(model, obs, None)
}

/// Kalman filter with known inputs `u_t` entering as `G u_{t-1}` in the
/// prediction of `x_t`.
pub fn kf_filter_with_input(model: &LinearModel, obs: &[Vector], inputs: &[Vector]) -> Result<FilterOutput> {
    if inputs.len() != obs.len() {
        return Err(Error::ShapeMismatch("one input per observation is required".into()));
    }
    let biases = inputs
        .iter()
        .map(|u| model.input_bias(Some(u)).map(|b| b.expect("input map present")))
        .collect::<Result<Vec<_>>>()?;
    run_filter(model, obs, Some(&biases))
}

fn run_filter<M: StateSpaceModel + ?Sized>(
    model: &M,
    obs: &[Vector],
    biases: Option<&[Vector]>,
) -> Result<FilterOutput> {
    check_obs(obs, model.obs_dim())?;
    let t_len = obs.len();
    let mut out = FilterOutput {
        means: Vec::with_capacity(t_len),
        covs: Vec::with_capacity(t_len),
        gains: Some(Vec::with_capacity(t_len)),
        innovations: Some(Vec::with_capacity(t_len)),
        prior_covs: Some(Vec::with_capacity(t_len)),
    };
    let mut mean = model.init().mean.clone();
    let mut cov = model.init().cov.clone();
    for (t, y) in obs.iter().enumerate() {
        let f = model.transition_jacobian(&mean);
        let mut prior_mean = model.transition(&mean);
        if let Some(b) = biases {
            prior_mean += &b[t];
        }
        let mut prior_cov = &f * &cov * f.transpose() + model.process_cov();
        symmetrize_mut(&mut prior_cov);

        let y_pred = model.observe(&prior_mean);
        let h = model.observation_jacobian(&prior_mean);
        let upd = kalman_update(&prior_mean, &prior_cov, y, &y_pred, &h, model.obs_cov())?;
        mean = upd.mean;
        cov = upd.cov;
        out.means.push(mean.clone());
        out.covs.push(cov.clone());
        out.gains.as_mut().unwrap().push(upd.gain);
        out.innovations.as_mut().unwrap().push(upd.innovation);
        out.prior_covs.as_mut().unwrap().push(prior_cov);
    }
    Ok(out)
}
