use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{apbm_augmented_step, fixed_theta_maps, ApbmModel, AugmentedBelief};
use crate::error::{Error, Result};
use crate::filters::FilterOutput;
use crate::gaussmath::{Matrix, Vector};
use crate::ssm::{Dataset, NonlinearModel, StateSpaceModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApbmTrainConfig {
    pub epochs: usize,
    pub seed: u64,
    /// Visit sequences in a fresh random order each epoch.
    pub shuffle: bool,
    /// Stop after the sequence during which this many seconds elapse.
    pub time_cap_secs: Option<f64>,
}

impl Default for ApbmTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            seed: 0,
            shuffle: true,
            time_cap_secs: None,
        }
    }
}

/// `θ` posterior after offline filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct ApbmFit {
    pub theta: Vector,
    pub theta_cov: Matrix,
    pub sequences_seen: usize,
    pub steps: usize,
}

impl ApbmFit {
    pub fn theta_cov_diag(&self) -> Vec<f64> {
        self.theta_cov.diagonal().as_slice().to_vec()
    }
}

/// Filters every training sequence in turn, re-initializing the state block
/// at each sequence start and carrying the `θ` block throughout.
pub fn train_apbm_offline(ds: &Dataset, model: &ApbmModel, cfg: &ApbmTrainConfig) -> Result<ApbmFit> {
    if ds.iter().any(|t| t.obs_dim() != model.pbm.obs_dim()) {
        return Err(Error::ShapeMismatch("observations do not match the APBM observation model".into()));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut belief = model.initial_belief();
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let (mut seen, mut steps) = (0, 0);
    'epochs: for _ in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        for &i in &order {
            belief.reset_state(model.pbm.init());
            for y in &ds.trajectories[i].obs {
                belief = apbm_augmented_step(model, &belief, y)?;
            }
            seen += 1;
            steps += ds.trajectories[i].len();
            if cfg.time_cap_secs.is_some_and(|cap| started.elapsed().as_secs_f64() >= cap) {
                break 'epochs;
            }
        }
    }
    Ok(ApbmFit {
        theta: belief.theta(),
        theta_cov: belief.theta_cov(),
        sequences_seen: seen,
        steps,
    })
}

/// The APBM at a fixed `θ` as an ordinary model for `ekf_filter`.
pub fn fixed_theta_model(model: &ApbmModel, theta: &Vector) -> Result<NonlinearModel> {
    if theta.len() != model.theta_dim() {
        return Err(Error::ShapeMismatch(format!(
            "theta has {} entries, model expects {}",
            theta.len(),
            model.theta_dim()
        )));
    }
    let (f, jf) = fixed_theta_maps(model, theta);
    let h = model.pbm.h_map().clone();
    let jh_model = model.pbm.clone();
    let jh: crate::ssm::JacMap = std::sync::Arc::new(move |x: &Vector| jh_model.observation_jacobian(x));
    Ok(NonlinearModel::new(
        f,
        h,
        model.pbm.q.clone(),
        model.pbm.r.clone(),
        model.pbm.init.clone(),
    )?
    .with_jacobians(Some(jf), Some(jh)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApbmOnlineOutput {
    /// State marginal per step; gains and prior covariances are not kept.
    pub filter: FilterOutput,
    pub thetas: Vec<Vector>,
}

/// Joint state/parameter filtering over one stream from `init`.
pub fn run_apbm_online(model: &ApbmModel, obs: &[Vector], init: &AugmentedBelief) -> Result<ApbmOnlineOutput> {
    let mut out = ApbmOnlineOutput {
        filter: FilterOutput {
            means: Vec::with_capacity(obs.len()),
            covs: Vec::with_capacity(obs.len()),
            gains: None,
            innovations: None,
            prior_covs: None,
        },
        thetas: Vec::with_capacity(obs.len()),
    };
    let mut belief = init.clone();
    for y in obs {
        belief = apbm_augmented_step(model, &belief, y)?;
        out.filter.means.push(belief.x_mean());
        out.filter.covs.push(belief.x_cov());
        out.thetas.push(belief.theta());
    }
    Ok(out)
}
