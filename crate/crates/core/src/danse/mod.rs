//! Recurrent Gaussian prior with a closed-form linear-Gaussian posterior.
//!
//! A GRU reads `y_{t-1}` and emits `N(x̂_{t|t-1}, diag Σ_{t|t-1})`. With a
//! known linear observation model the posterior is a Kalman update, and
//! the network is trained by maximizing the marginal likelihood of the
//! observations.

mod train;

pub use train::{danse_batch_nll, train_danse, DanseConfig, TrainedDanse};

use rand::Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::filters::{kalman_update, FilterOutput};
use crate::gaussmath::{Cholesky, Gaussian, Matrix, Vector};
use crate::nn::{
    fc_forward, gradient_of, gru_step, Activation, Checkpoint, CheckpointMeta, Dense, Gru, ParamStore, Tape, Var,
};

pub const METHOD: &str = "danse";
pub const VAR_MIN: f64 = 1e-6;
pub const VAR_MAX: f64 = 1e6;

/// Known linear observation model `y_t = H_t x_t + w_t`, `w_t ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DanseObsModel {
    h: Vec<Matrix>,
    pub r: Matrix,
}

impl DanseObsModel {
    pub fn new(h: Matrix, r: Matrix) -> Result<Self> {
        Self::time_varying(vec![h], r)
    }

    /// One `H_t` per step; the last one is reused past the end.
    pub fn time_varying(h: Vec<Matrix>, r: Matrix) -> Result<Self> {
        let first = h.first().ok_or(Error::EmptyInput)?;
        let (n, m) = (first.nrows(), first.ncols());
        if h.iter().any(|ht| ht.nrows() != n || ht.ncols() != m) {
            return Err(Error::ShapeMismatch("observation matrices differ in shape".into()));
        }
        if r.nrows() != n || r.ncols() != n {
            return Err(Error::ShapeMismatch(format!("R must be {n}x{n}")));
        }
        Cholesky::new(&r).map_err(|_| Error::NotPositiveDefinite {
            context: "observation noise covariance",
        })?;
        for ht in &h {
            let hth = ht.transpose() * ht;
            let chol = Cholesky::new(&hth).map_err(|_| Error::RankDeficientH)?;
            let d = chol.l().diagonal();
            if d.min() <= 1e-10 * d.max() {
                return Err(Error::RankDeficientH);
            }
        }
        Ok(Self { h, r })
    }

    pub fn state_dim(&self) -> usize {
        self.h[0].ncols()
    }

    pub fn obs_dim(&self) -> usize {
        self.h[0].nrows()
    }

    pub fn h_at(&self, t: usize) -> &Matrix {
        &self.h[t.min(self.h.len() - 1)]
    }

    /// Least-squares state estimate `(HᵀH)⁻¹ Hᵀ y` at step `t`.
    pub fn pseudo_state(&self, t: usize, y: &Vector) -> Vector {
        let h = self.h_at(t);
        let chol = Cholesky::new(&(h.transpose() * h)).expect("checked at construction");
        chol.solve_vec(&(h.transpose() * y))
    }
}

/// GRU → optional FC → mean and log-variance heads, with frozen affine
/// input and output normalization (identity unless fitted to data).
#[derive(Debug, Clone, PartialEq)]
pub struct DansePriorNet {
    pub store: ParamStore,
    pub m: usize,
    pub n: usize,
    pub hidden: usize,
    gru: Gru,
    fc: Option<Dense>,
    mean_head: Dense,
    logvar_head: Dense,
    in_shift: usize,
    in_scale: usize,
    out_shift: usize,
    out_scale: usize,
}

impl DansePriorNet {
    pub fn new<R: Rng + ?Sized>(m: usize, n: usize, hidden: usize, head_hidden: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let gru = Gru::register(&mut store, "gru", n, hidden, rng);
        let fc = (head_hidden > 0).then(|| Dense::register(&mut store, "fc", hidden, head_hidden, rng));
        let width = if head_hidden > 0 { head_hidden } else { hidden };
        let mean_head = Dense::register(&mut store, "mean", width, m, rng);
        let logvar_head = Dense::register(&mut store, "logvar", width, m, rng);
        let in_shift = store.add_frozen("norm.in_shift", &vec![0.0; n]);
        let in_scale = store.add_frozen("norm.in_scale", &vec![1.0; n]);
        let out_shift = store.add_frozen("norm.out_shift", &vec![0.0; m]);
        let out_scale = store.add_frozen("norm.out_scale", &vec![1.0; m]);
        Self {
            store,
            m,
            n,
            hidden,
            gru,
            fc,
            mean_head,
            logvar_head,
            in_shift,
            in_scale,
            out_shift,
            out_scale,
        }
    }

    pub fn from_store(store: ParamStore, m: usize, n: usize) -> Result<Self> {
        let gru = Gru::find(&store, "gru")?;
        let fc = store.slice("fc.w").map(|_| Dense::find(&store, "fc")).transpose()?;
        let mean_head = Dense::find(&store, "mean")?;
        let logvar_head = Dense::find(&store, "logvar")?;
        if gru.inputs != n || mean_head.outputs != m || logvar_head.outputs != m {
            return Err(Error::Config("prior network layout does not match the model dimensions".into()));
        }
        Ok(Self {
            hidden: gru.hidden,
            in_shift: store.offset("norm.in_shift")?,
            in_scale: store.offset("norm.in_scale")?,
            out_shift: store.offset("norm.out_shift")?,
            out_scale: store.offset("norm.out_scale")?,
            store,
            m,
            n,
            gru,
            fc,
            mean_head,
            logvar_head,
        })
    }

    /// Zeroes every trainable weight and bias.
    pub fn zero_weights(&mut self) {
        for s in self.store.layout().to_vec() {
            if s.trainable {
                self.store.values[s.range()].fill(0.0);
            }
        }
    }

    /// Sets input normalization `(y - shift) / scale` and output
    /// `mean = scale ⊙ head + shift`, `var = scale² ⊙ exp(head)`.
    pub fn set_normalization(&mut self, in_shift: &[f64], in_scale: &[f64], out_shift: &[f64], out_scale: &[f64]) {
        let v = &mut self.store.values;
        v[self.in_shift..self.in_shift + self.n].copy_from_slice(in_shift);
        v[self.in_scale..self.in_scale + self.n].copy_from_slice(in_scale);
        v[self.out_shift..self.out_shift + self.m].copy_from_slice(out_shift);
        v[self.out_scale..self.out_scale + self.m].copy_from_slice(out_scale);
    }

    pub fn to_checkpoint(&self, obs: &DanseObsModel, meta: CheckpointMeta) -> Checkpoint {
        let h = obs.h_at(0);
        let row_major = |a: &Matrix| a.transpose().as_slice().to_vec();
        Checkpoint::new(
            METHOD,
            &self.store,
            meta,
            json!({
                "m": self.m,
                "n": self.n,
                "hidden": self.hidden,
                "h": row_major(h),
                "r": row_major(&obs.r),
            }),
        )
    }

    /// Rebuilds the network and the observation model it was trained with.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, DanseObsModel)> {
        ckpt.expect_method(METHOD)?;
        let dim = |k: &str| {
            ckpt.arch
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("checkpoint arch lacks {k:?}")))
        };
        let mat = |k: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let vals: Vec<f64> = ckpt
                .arch
                .get(k)
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .ok_or_else(|| Error::Config(format!("checkpoint arch lacks {k:?}")))?;
            if vals.len() != rows * cols {
                return Err(Error::Config(format!("checkpoint {k:?} has the wrong size")));
            }
            Ok(Matrix::from_row_slice(rows, cols, &vals))
        };
        let (m, n) = (dim("m")?, dim("n")?);
        let obs = DanseObsModel::new(mat("h", n, m)?, mat("r", n, n)?)?;
        Ok((Self::from_store(ckpt.store()?, m, n)?, obs))
    }

    pub fn initial_hidden(&self) -> Vector {
        Vector::zeros(self.hidden)
    }
}

/// Prior mean and variance nodes for one step.
pub(crate) struct PriorVars {
    pub mean: Var,
    pub var: Var,
    pub hidden: Var,
}

pub(crate) fn prior_on_tape(tape: &mut Tape, net: &DansePriorNet, y_prev: Var, hidden: Var) -> Result<PriorVars> {
    let params = tape.params();
    let slice = |at: usize, len: usize| Vector::from_column_slice(&params[at..at + len]);
    let in_scale = slice(net.in_scale, net.n);
    let in_shift = slice(net.in_shift, net.n);
    let out_scale = slice(net.out_scale, net.m);
    let out_shift = slice(net.out_shift, net.m);
    let a = in_scale.map(|s| 1.0 / s);
    let b = -in_shift.component_mul(&a);
    let x = tape.scale_shift(y_prev, &a, &b);
    let hidden = gru_step(tape, &net.gru, x, hidden)?;
    let feat = match &net.fc {
        Some(fc) => fc_forward(tape, fc, hidden, Activation::Relu)?,
        None => hidden,
    };
    let mean_raw = fc_forward(tape, &net.mean_head, feat, Activation::Identity)?;
    let mean = tape.scale_shift(mean_raw, &out_scale, &out_shift);
    let lv_raw = fc_forward(tape, &net.logvar_head, feat, Activation::Identity)?;
    let log_var_offset = out_scale.map(|s| 2.0 * s.ln());
    let lv = tape.scale_shift(lv_raw, &Vector::from_element(net.m, 1.0), &log_var_offset);
    let var_raw = tape.exp(lv);
    let var = tape.clamp(var_raw, VAR_MIN, VAR_MAX);
    if tape.value(mean).iter().chain(tape.value(var).iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinitePrior { step: 0 });
    }
    Ok(PriorVars { mean, var, hidden })
}

/// `-ln N(y; H μ, H diag(d) Hᵀ + R)` as one tape node with analytic
/// gradients in `μ` and `d`.
pub(crate) fn gaussian_nll_on_tape(tape: &mut Tape, mean: Var, var: Var, y: &Vector, h: &Matrix, r: &Matrix) -> Result<Var> {
    let mu = tape.value(mean);
    let d = tape.value(var);
    let n = y.len();
    let mut s = h * Matrix::from_diagonal(d) * h.transpose() + r;
    crate::gaussmath::symmetrize_mut(&mut s);
    let chol = Cholesky::new(&s).map_err(|_| Error::NotPositiveDefinite {
        context: "marginal observation covariance",
    })?;
    let e = y - h * mu;
    let s_inv_e = chol.solve_vec(&e);
    let value = 0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + chol.log_det() + e.dot(&s_inv_e));
    let d_mean = -(h.transpose() * &s_inv_e);
    let s_inv_h = chol.solve(h);
    let ht_s_inv_e = h.transpose() * &s_inv_e;
    let d_var = Vector::from_fn(h.ncols(), |i, _| 0.5 * (h.column(i).dot(&s_inv_h.column(i)) - ht_s_inv_e[i].powi(2)));
    Ok(tape.local(
        Vector::from_element(1, value),
        vec![
            (mean, Matrix::from_row_slice(1, d_mean.len(), d_mean.as_slice())),
            (var, Matrix::from_row_slice(1, d_var.len(), d_var.as_slice())),
        ],
    ))
}

/// Prior for the next step; advances `hidden`. `y_prev = None` feeds the
/// zero start token.
pub fn danse_prior(net: &DansePriorNet, hidden: &mut Vector, y_prev: Option<&Vector>) -> Result<Gaussian> {
    let y = match y_prev {
        Some(y) if y.len() != net.n => {
            return Err(Error::ShapeMismatch(format!("expected {} observations, got {}", net.n, y.len())))
        }
        Some(y) => y.clone(),
        None => Vector::zeros(net.n),
    };
    let mut tape = Tape::new(&net.store.values);
    let yv = tape.input(y);
    let h = tape.input(hidden.clone());
    let p = prior_on_tape(&mut tape, net, yv, h)?;
    *hidden = tape.value(p.hidden).clone();
    Ok(Gaussian {
        mean: tape.value(p.mean).clone(),
        cov: Matrix::from_diagonal(tape.value(p.var)),
    })
}

/// Kalman-form posterior under the known observation model.
pub fn danse_posterior(prior: &Gaussian, obs: &DanseObsModel, t: usize, y: &Vector) -> Result<(Gaussian, Matrix)> {
    let h = obs.h_at(t);
    if prior.dim() != h.ncols() || y.len() != h.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "prior of dim {}, H {}x{}, observation {}",
            prior.dim(),
            h.nrows(),
            h.ncols(),
            y.len()
        )));
    }
    let upd = kalman_update(&prior.mean, &prior.cov, y, &(h * &prior.mean), h, &obs.r)?;
    Ok((
        Gaussian {
            mean: upd.mean,
            cov: upd.cov,
        },
        upd.gain,
    ))
}

/// Summed negative log marginal likelihood of one observation sequence.
pub fn danse_sequence_nll(net: &DansePriorNet, obs: &DanseObsModel, ys: &[Vector]) -> Result<f64> {
    let mut tape = Tape::new(&net.store.values);
    let mut hidden = tape.input(net.initial_hidden());
    let mut total = 0.0;
    for (t, y) in ys.iter().enumerate() {
        let y_prev = tape.input(if t == 0 { Vector::zeros(net.n) } else { ys[t - 1].clone() });
        let p = prior_on_tape(&mut tape, net, y_prev, hidden)?;
        let nll = gaussian_nll_on_tape(&mut tape, p.mean, p.var, y, obs.h_at(t), &obs.r)?;
        total += tape.scalar(nll);
        hidden = p.hidden;
        // The tape is only used for its forward values here; start fresh
        // every step to keep memory flat.
        let h = tape.value(hidden).clone();
        tape = Tape::new(&net.store.values);
        hidden = tape.input(h);
    }
    Ok(total)
}

fn sequence_nll_on_tape(tape: &mut Tape, net: &DansePriorNet, obs: &DanseObsModel, ys: &[Vector]) -> Result<Var> {
    let mut hidden = tape.input(net.initial_hidden());
    let mut total: Option<Var> = None;
    for (t, y) in ys.iter().enumerate() {
        let yp = tape.input(if t == 0 { Vector::zeros(net.n) } else { ys[t - 1].clone() });
        let p = prior_on_tape(tape, net, yp, hidden)?;
        let l = gaussian_nll_on_tape(tape, p.mean, p.var, y, obs.h_at(t), &obs.r)?;
        total = Some(match total {
            Some(a) => tape.add(a, l),
            None => l,
        });
        hidden = p.hidden;
    }
    total.ok_or(Error::EmptyInput)
}

/// [`danse_sequence_nll`] and its gradient in the trainable parameters
/// (zero for frozen entries), by reverse mode over the whole sequence.
pub fn danse_sequence_nll_gradient(net: &DansePriorNet, obs: &DanseObsModel, ys: &[Vector]) -> Result<(f64, Vec<f64>)> {
    gradient_of(|tape| sequence_nll_on_tape(tape, net, obs, ys), &net.store)
}

/// Filters a sequence: prior from the network, posterior from the update.
pub fn danse_filter(net: &DansePriorNet, obs: &DanseObsModel, ys: &[Vector]) -> Result<FilterOutput> {
    if obs.state_dim() != net.m || obs.obs_dim() != net.n {
        return Err(Error::ShapeMismatch("observation model does not match the network".into()));
    }
    let mut hidden = net.initial_hidden();
    let mut out = FilterOutput {
        means: Vec::with_capacity(ys.len()),
        covs: Vec::with_capacity(ys.len()),
        gains: Some(Vec::with_capacity(ys.len())),
        innovations: None,
        prior_covs: Some(Vec::with_capacity(ys.len())),
    };
    for (t, y) in ys.iter().enumerate() {
        let prior = danse_prior(net, &mut hidden, if t == 0 { None } else { Some(&ys[t - 1]) })
            .map_err(|e| match e {
                Error::NonFinitePrior { .. } => Error::NonFinitePrior { step: t },
                e => e,
            })?;
        let (post, gain) = danse_posterior(&prior, obs, t, y)?;
        out.means.push(post.mean);
        out.covs.push(post.cov);
        out.gains.as_mut().unwrap().push(gain);
        out.prior_covs.as_mut().unwrap().push(prior.cov);
    }
    Ok(out)
}
