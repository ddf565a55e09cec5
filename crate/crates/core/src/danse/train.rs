use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{danse_sequence_nll, gaussian_nll_on_tape, prior_on_tape, DanseObsModel, DansePriorNet};
use crate::error::{Error, Result};
use crate::gaussmath::Vector;
use crate::nn::{fit, FitReport, ParamStore, Tape, TrainConfig, Var, WindowObjective};
use crate::ssm::{Dataset, Trajectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DanseConfig {
    pub hidden: usize,
    /// Width of the ReLU layer between the GRU and the heads; 0 removes it.
    pub head_hidden: usize,
    /// Fit the frozen input/output normalization to the training data.
    pub normalize: bool,
    pub train: TrainConfig,
}

impl Default for DanseConfig {
    fn default() -> Self {
        Self {
            hidden: 40,
            head_hidden: 32,
            normalize: true,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDanse {
    pub net: DansePriorNet,
    pub report: FitReport,
}

/// Sum of per-sequence negative log-likelihoods.
pub fn danse_batch_nll(net: &DansePriorNet, obs: &DanseObsModel, ds: &Dataset) -> Result<f64> {
    ds.iter().map(|t| danse_sequence_nll(net, obs, &t.obs)).sum()
}

struct Objective<'a> {
    net: DansePriorNet,
    obs: &'a DanseObsModel,
    seqs: &'a [Trajectory],
}

impl WindowObjective for Objective<'_> {
    type Carry = Vector;

    fn num_sequences(&self) -> usize {
        self.seqs.len()
    }

    fn seq_len(&self, seq: usize) -> usize {
        self.seqs[seq].len()
    }

    fn start(&self, _: &ParamStore, _: usize) -> Result<Vector> {
        Ok(self.net.initial_hidden())
    }

    fn window(&mut self, tape: &mut Tape, seq: usize, range: Range<usize>, carry: &mut Vector) -> Result<(Var, usize)> {
        let ys = &self.seqs[seq].obs;
        let mut hidden = tape.input(carry.clone());
        let mut total: Option<Var> = None;
        let terms = range.len();
        for t in range {
            let y_prev = tape.input(if t == 0 { Vector::zeros(self.net.n) } else { ys[t - 1].clone() });
            let p = prior_on_tape(tape, &self.net, y_prev, hidden)?;
            let nll = gaussian_nll_on_tape(tape, p.mean, p.var, &ys[t], self.obs.h_at(t), &self.obs.r)?;
            total = Some(match total {
                Some(a) => tape.add(a, nll),
                None => nll,
            });
            hidden = p.hidden;
        }
        *carry = tape.value(hidden).clone();
        Ok((total.expect("non-empty window"), terms))
    }
}

fn mean_and_sd(samples: impl Iterator<Item = Vector>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = Vector::zeros(dim);
    let mut sq = Vector::zeros(dim);
    let mut k = 0usize;
    for v in samples {
        sum += &v;
        sq += v.component_mul(&v);
        k += 1;
    }
    let k = k.max(1) as f64;
    let mean = sum / k;
    let sd = (sq / k - mean.component_mul(&mean)).map(|v| v.max(0.0).sqrt().max(1e-3));
    (mean.as_slice().to_vec(), sd.as_slice().to_vec())
}

/// Maximum-likelihood training on observations only. Validation scores
/// the mean per-step negative log-likelihood.
pub fn train_danse(obs: &DanseObsModel, train: &Dataset, val: Option<&Dataset>, cfg: &DanseConfig) -> Result<TrainedDanse> {
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    if train.iter().any(|t| t.obs_dim() != obs.obs_dim()) {
        return Err(Error::ShapeMismatch("observations do not match the observation model".into()));
    }
    let (m, n) = (obs.state_dim(), obs.obs_dim());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut net = DansePriorNet::new(m, n, cfg.hidden, cfg.head_hidden, &mut rng);
    if cfg.normalize {
        let ys = || train.iter().flat_map(|t| t.obs.iter().cloned());
        let (in_shift, in_scale) = mean_and_sd(ys(), n);
        let (out_shift, out_scale) = mean_and_sd(
            train
                .iter()
                .flat_map(|t| t.obs.iter().enumerate().map(|(k, y)| obs.pseudo_state(k, y))),
            m,
        );
        net.set_normalization(&in_shift, &in_scale, &out_shift, &out_scale);
    }
    let mut objective = Objective {
        net: net.clone(),
        obs,
        seqs: &train.trajectories,
    };
    let val_ds = val.unwrap_or(train);
    let steps: usize = val_ds.iter().map(|t| t.len()).sum();
    let score = |p: &ParamStore| -> Result<f64> {
        let candidate = DansePriorNet::from_store(p.clone(), m, n)?;
        Ok(match danse_batch_nll(&candidate, obs, val_ds) {
            Ok(v) if v.is_finite() => v / steps.max(1) as f64,
            _ => f64::INFINITY,
        })
    };
    let report = fit(&mut net.store, &mut objective, &cfg.train, score)?;
    Ok(TrainedDanse { net, report })
}
