use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{knet_filter, step_on_tape, KGainNet, KnetState, StepVars};
use crate::error::{Error, Result};
use crate::gaussmath::{Matrix, Vector};
use crate::nn::{fit, FitReport, ParamStore, Tape, TrainConfig, Var, WindowObjective};
use crate::ssm::{Dataset, StateSpaceModel, Trajectory};

/// Factor applied to the random output weights at initialization.
const INIT_WEIGHT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KnetLoss {
    /// `‖e‖²` per step.
    #[default]
    Squared,
    /// `‖e‖` per step.
    Norm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnetConfig {
    /// GRU width; `None` means `10 (m + n)`.
    pub hidden: Option<usize>,
    pub loss: KnetLoss,
    /// Supervised (state error) or unsupervised (next-observation error).
    pub supervised: bool,
    /// Momentum of the running feature-scale estimates.
    pub scale_momentum: f64,
    pub train: TrainConfig,
}

impl Default for KnetConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            loss: KnetLoss::Squared,
            supervised: true,
            scale_momentum: 0.99,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedKnet {
    pub net: KGainNet,
    pub report: FitReport,
}

struct Objective<'a, M: ?Sized> {
    model: &'a M,
    net: KGainNet,
    seqs: &'a [Trajectory],
    supervised: bool,
    loss: KnetLoss,
    momentum: f64,
    obs_ms: Vector,
    state_ms: Vector,
}

fn step_loss(tape: &mut Tape, e: Var, kind: KnetLoss) -> Var {
    let sq = tape.sum_sq(e);
    match kind {
        KnetLoss::Squared => sq,
        KnetLoss::Norm => {
            let s = tape.scalar(sq);
            let r = s.sqrt();
            let d = if r > 0.0 { 0.5 / r } else { 0.0 };
            tape.local(Vector::from_element(1, r), vec![(sq, Matrix::from_element(1, 1, d))])
        }
    }
}

impl<M: StateSpaceModel + ?Sized> WindowObjective for Objective<'_, M> {
    type Carry = KnetState;

    fn num_sequences(&self) -> usize {
        self.seqs.len()
    }

    fn seq_len(&self, seq: usize) -> usize {
        self.seqs[seq].len()
    }

    fn start(&self, _: &ParamStore, _: usize) -> Result<KnetState> {
        Ok(self.net.initial_state(self.model))
    }

    fn window(&mut self, tape: &mut Tape, seq: usize, range: Range<usize>, carry: &mut KnetState) -> Result<(Var, usize)> {
        let traj = &self.seqs[seq];
        let mut vars = StepVars {
            x_post: tape.input(carry.x_post.clone()),
            x_prior: tape.input(carry.x_prior.clone()),
            hidden: tape.input(carry.hidden.clone()),
        };
        let mut started = carry.started;
        let mut total: Option<Var> = None;
        let mut terms = 0;
        for t in range {
            let rec = step_on_tape(tape, self.model, &self.net, vars, started, &traj.obs[t])?;
            let err = if self.supervised {
                let states = traj.states.as_ref().ok_or_else(|| {
                    Error::InvalidArgument(format!("trajectory {:?} has no states", traj.id))
                })?;
                let x = tape.input(states[t].clone());
                Some(tape.sub(rec.vars.x_post, x))
            } else if t > 0 {
                Some(rec.innovation)
            } else {
                None
            };
            if let Some(e) = err {
                let l = step_loss(tape, e, self.loss);
                total = Some(match total {
                    Some(acc) => tape.add(acc, l),
                    None => l,
                });
                terms += 1;
            }
            let a = self.momentum;
            let innov = tape.value(rec.innovation);
            self.obs_ms.zip_apply(innov, |s, v| *s = a * *s + (1.0 - a) * v * v);
            if started {
                self.state_ms
                    .zip_apply(&rec.state_diff, |s, v| *s = a * *s + (1.0 - a) * v * v);
            }
            vars = rec.vars;
            started = true;
        }
        *carry = KnetState {
            x_post: tape.value(vars.x_post).clone(),
            x_prior: tape.value(vars.x_prior).clone(),
            hidden: tape.value(vars.hidden).clone(),
            started,
        };
        let total = match total {
            Some(v) => v,
            None => tape.input(Vector::zeros(1)),
        };
        Ok((total, terms))
    }

    fn end_epoch(&mut self, params: &mut ParamStore) {
        let sd = |ms: &Vector| ms.iter().map(|v| v.sqrt().max(1e-6)).collect::<Vec<_>>();
        params.get_mut("norm.obs").unwrap().copy_from_slice(&sd(&self.obs_ms));
        params.get_mut("norm.state").unwrap().copy_from_slice(&sd(&self.state_ms));
    }
}

/// Per-coordinate RMS of the features the untrained network sees.
fn initial_scales<M: StateSpaceModel + ?Sized>(model: &M, net: &KGainNet, seqs: &[Trajectory]) -> (Vec<f64>, Vec<f64>) {
    let mut obs = Vector::zeros(net.n);
    let mut state = Vector::zeros(net.m);
    let (mut n_obs, mut n_state) = (0usize, 0usize);
    for traj in seqs.iter().take(8) {
        let Ok(out) = knet_filter(model, net, &traj.obs) else { continue };
        for (t, innov) in out.innovations.iter().enumerate() {
            obs += innov.component_mul(innov);
            n_obs += 1;
            if t > 0 {
                let prior = model.transition(&out.means[t - 1]);
                let d = &out.means[t] - prior;
                state += d.component_mul(&d);
                n_state += 1;
            }
        }
    }
    let finish = |acc: Vector, k: usize| -> Vec<f64> {
        acc.iter()
            .map(|s| if k > 0 { (s / k as f64).sqrt().max(1e-3) } else { 1.0 })
            .map(|v| if v.is_finite() { v } else { 1.0 })
            .collect()
    };
    (finish(obs, n_obs), finish(state, n_state))
}

/// Mean squared error per state coordinate; `inf` if the filter diverges.
pub(crate) fn state_mse<M: StateSpaceModel + ?Sized>(model: &M, net: &KGainNet, ds: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for traj in ds {
        let Some(states) = &traj.states else { continue };
        match knet_filter(model, net, &traj.obs) {
            Ok(out) => {
                for (x, s) in out.means.iter().zip(states) {
                    total += (x - s).norm_squared();
                    count += x.len();
                }
            }
            Err(_) => return f64::INFINITY,
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

fn innovation_mse<M: StateSpaceModel + ?Sized>(model: &M, net: &KGainNet, ds: &[Trajectory]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for traj in ds {
        match knet_filter(model, net, &traj.obs) {
            Ok(out) => {
                for innov in out.innovations.iter().skip(1) {
                    total += innov.norm_squared();
                    count += innov.len();
                }
            }
            Err(_) => return f64::INFINITY,
        }
    }
    if count == 0 {
        f64::INFINITY
    } else {
        total / count as f64
    }
}

/// Trains the gain network. Validation uses state MSE when the validation
/// set is labeled and supervised training was requested, and the
/// next-observation error otherwise; without a validation set the
/// training sequences are scored.
pub fn train_knet<M: StateSpaceModel + ?Sized>(
    model: &M,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &KnetConfig,
) -> Result<TrainedKnet> {
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    if cfg.supervised && !train.supervised() {
        return Err(Error::InvalidArgument("supervised training needs ground-truth states".into()));
    }
    if !(0.0..1.0).contains(&cfg.scale_momentum) {
        return Err(Error::Config("scale_momentum must lie in [0, 1)".into()));
    }
    let (m, n) = (model.state_dim(), model.obs_dim());
    let hidden = cfg.hidden.unwrap_or_else(|| KGainNet::default_hidden(m, n));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut net = KGainNet::new(m, n, hidden, &mut rng);
    // A random gain can make the untrained filter diverge on unstable
    // dynamics; start from half the least-squares inverse of H instead.
    let h0 = model.observation_jacobian(&model.init().mean);
    let k0 = h0
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidArgument(format!("observation Jacobian: {e}")))?
        * 0.5;
    net.set_base_gain(&k0, INIT_WEIGHT_SCALE);
    let (obs_sd, state_sd) = initial_scales(model, &net, &train.trajectories);
    net.set_scales(&obs_sd, &state_sd);

    let square = |v: &[f64]| Vector::from_iterator(v.len(), v.iter().map(|s| s * s));
    let mut objective = Objective {
        model,
        net: net.clone(),
        seqs: &train.trajectories,
        supervised: cfg.supervised,
        loss: cfg.loss,
        momentum: cfg.scale_momentum,
        obs_ms: square(&obs_sd),
        state_ms: square(&state_sd),
    };
    let val_seqs = val.map_or(&train.trajectories[..], |v| &v.trajectories[..]);
    let labeled = cfg.supervised && val_seqs.iter().all(|t| t.states.is_some());
    let score = |p: &ParamStore| -> Result<f64> {
        let candidate = KGainNet::from_store(p.clone(), m, n)?;
        Ok(if labeled {
            state_mse(model, &candidate, val_seqs)
        } else {
            innovation_mse(model, &candidate, val_seqs)
        })
    };
    let report = fit(&mut net.store, &mut objective, &cfg.train, score)?;
    Ok(TrainedKnet { net, report })
}

pub fn train_knet_supervised<M: StateSpaceModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    val: Option<&Dataset>,
    cfg: &KnetConfig,
) -> Result<TrainedKnet> {
    train_knet(model, ds, val, &KnetConfig { supervised: true, ..cfg.clone() })
}

pub fn train_knet_unsupervised<M: StateSpaceModel + ?Sized>(
    model: &M,
    ds: &Dataset,
    val: Option<&Dataset>,
    cfg: &KnetConfig,
) -> Result<TrainedKnet> {
    train_knet(model, ds, val, &KnetConfig { supervised: false, ..cfg.clone() })
}
