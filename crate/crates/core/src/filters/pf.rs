use rand::Rng;

use super::kalman::FilterOutput;
use crate::error::{Error, Result};
use crate::gaussmath::{psd_sqrt, sample_with_sqrt, Cholesky, Matrix, Vector, PSD_JITTER};
use crate::ssm::StateSpaceModel;

/// Bootstrap particle filter with systematic resampling after every step.
///
/// Weights live in the log domain. Reported moments are the weighted
/// mean and covariance before resampling, with a small diagonal jitter so a
/// single-particle run still yields a valid covariance.
pub fn bootstrap_pf<M, R>(model: &M, obs: &[Vector], n_particles: usize, rng: &mut R) -> Result<FilterOutput>
where
    M: StateSpaceModel + ?Sized,
    R: Rng + ?Sized,
{
    if n_particles == 0 {
        return Err(Error::InvalidArgument("particle filter needs at least one particle".into()));
    }
    let m = model.state_dim();
    let n = model.obs_dim();
    if let Some(bad) = obs.iter().find(|y| y.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "observation of length {} for a model with {n} outputs",
            bad.len()
        )));
    }
    let q_sqrt = psd_sqrt(model.process_cov())?;
    let r_chol = Cholesky::new(model.obs_cov()).map_err(|_| Error::NotPositiveDefinite {
        context: "observation noise covariance",
    })?;
    let init_sqrt = psd_sqrt(&model.init().cov)?;
    let zero = Vector::zeros(m);

    let mut particles: Vec<Vector> = (0..n_particles)
        .map(|_| sample_with_sqrt(&model.init().mean, &init_sqrt, rng))
        .collect();
    let mut log_w = vec![0.0; n_particles];
    let mut weights = vec![0.0; n_particles];
    let mut out = FilterOutput {
        means: Vec::with_capacity(obs.len()),
        covs: Vec::with_capacity(obs.len()),
        gains: None,
        innovations: None,
        prior_covs: None,
    };

    for (t, y) in obs.iter().enumerate() {
        for (p, lw) in particles.iter_mut().zip(log_w.iter_mut()) {
            *p = model.transition(p) + sample_with_sqrt(&zero, &q_sqrt, rng);
            *lw = -0.5 * r_chol.quad_form(&(y - model.observe(p)));
        }
        let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::DegenerateWeights { step: t });
        }
        let mut total = 0.0;
        for (w, lw) in weights.iter_mut().zip(&log_w) {
            *w = (lw - max).exp();
            total += *w;
        }
        weights.iter_mut().for_each(|w| *w /= total);

        let mut mean = Vector::zeros(m);
        for (p, w) in particles.iter().zip(&weights) {
            mean.axpy(*w, p, 1.0);
        }
        let mut cov = Matrix::identity(m, m) * PSD_JITTER;
        for (p, w) in particles.iter().zip(&weights) {
            let d = p - &mean;
            cov.ger(*w, &d, &d, 1.0);
        }
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteEstimate { step: t });
        }
        out.means.push(mean);
        out.covs.push(cov);

        particles = systematic_resample(&particles, &weights, rng);
    }
    Ok(out)
}

/// One uniform draw, `N` evenly spaced pointers into the weight CDF.
pub fn systematic_resample<R: Rng + ?Sized>(particles: &[Vector], weights: &[f64], rng: &mut R) -> Vec<Vector> {
    let n = particles.len();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cdf = weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = u0 + i as f64 / n as f64;
        while u > cdf && j + 1 < n {
            j += 1;
            cdf += weights[j];
        }
        out.push(particles[j].clone());
    }
    out
}
