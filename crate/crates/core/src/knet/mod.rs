//! Filter whose Kalman gain comes from a recurrent network.
//!
//! The model supplies `f` and `h`; only first moments are propagated. Each
//! step the network reads the innovation `Δy_t = y_t - ŷ_{t|t-1}` and the
//! previous update `Δx̂_{t-1} = x̂_{t-1} - x̂_{t-1|t-2}` and emits `K_t`.

mod train;
mod uncertainty;

pub use train::{train_knet, train_knet_supervised, train_knet_unsupervised, KnetConfig, KnetLoss, TrainedKnet};
pub use uncertainty::extract_uncertainty;

use rand::Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::gaussmath::{Matrix, Vector};
use crate::nn::{
    fc_forward, gradient_of, gru_step, Activation, Checkpoint, CheckpointMeta, Dense, Gru, ParamStore, Tape, Var,
};
use crate::ssm::StateSpaceModel;

pub const METHOD: &str = "knet";

/// FC → GRU → FC gain network with frozen feature scales.
#[derive(Debug, Clone, PartialEq)]
pub struct KGainNet {
    pub store: ParamStore,
    pub m: usize,
    pub n: usize,
    pub hidden: usize,
    fc_in: Dense,
    gru: Gru,
    fc_out: Dense,
    obs_scale: usize,
    state_scale: usize,
}

/// Network inputs at one step, before scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct KnetFeatures {
    pub obs_diff: Vector,
    pub state_diff: Vector,
}

/// Recurrent state between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct KnetState {
    pub x_post: Vector,
    pub x_prior: Vector,
    pub hidden: Vector,
    pub started: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnetStep {
    pub estimate: Vector,
    pub gain: Matrix,
    pub obs_pred: Vector,
    pub features: KnetFeatures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnetOutput {
    pub means: Vec<Vector>,
    pub gains: Vec<Matrix>,
    pub innovations: Vec<Vector>,
}

impl KGainNet {
    pub fn new<R: Rng + ?Sized>(m: usize, n: usize, hidden: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let fc_in = Dense::register(&mut store, "fc_in", m + n, hidden, rng);
        let gru = Gru::register(&mut store, "gru", hidden, hidden, rng);
        let fc_out = Dense::register(&mut store, "fc_out", hidden, m * n, rng);
        let obs_scale = store.add_frozen("norm.obs", &vec![1.0; n]);
        let state_scale = store.add_frozen("norm.state", &vec![1.0; m]);
        Self {
            store,
            m,
            n,
            hidden,
            fc_in,
            gru,
            fc_out,
            obs_scale,
            state_scale,
        }
    }

    /// Hidden size default: ten times the feature width.
    pub fn default_hidden(m: usize, n: usize) -> usize {
        10 * (m + n)
    }

    pub fn from_store(store: ParamStore, m: usize, n: usize) -> Result<Self> {
        let fc_in = Dense::find(&store, "fc_in")?;
        let gru = Gru::find(&store, "gru")?;
        let fc_out = Dense::find(&store, "fc_out")?;
        if fc_in.inputs != m + n || fc_out.outputs != m * n || gru.hidden != fc_in.outputs || fc_out.inputs != gru.hidden {
            return Err(Error::Config("gain network layout does not match the model dimensions".into()));
        }
        let obs_scale = store.offset("norm.obs")?;
        let state_scale = store.offset("norm.state")?;
        Ok(Self {
            hidden: gru.hidden,
            store,
            m,
            n,
            fc_in,
            gru,
            fc_out,
            obs_scale,
            state_scale,
        })
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint::new(
            METHOD,
            &self.store,
            meta,
            json!({"m": self.m, "n": self.n, "hidden": self.hidden}),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.expect_method(METHOD)?;
        let dim = |k: &str| {
            ckpt.arch
                .get(k)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("checkpoint arch lacks {k:?}")))
        };
        Self::from_store(ckpt.store()?, dim("m")?, dim("n")?)
    }

    /// Output layer set to `W = 0`, `b = vec(K)`: the gain is `K` at every step.
    pub fn set_constant_gain(&mut self, k: &Matrix) {
        assert_eq!((k.nrows(), k.ncols()), (self.m, self.n));
        let w = self.fc_out.w;
        self.store.values[w..w + self.fc_out.inputs * self.fc_out.outputs].fill(0.0);
        let b = self.fc_out.b;
        for i in 0..self.m {
            for j in 0..self.n {
                self.store.values[b + i * self.n + j] = k[(i, j)];
            }
        }
    }

    /// Output bias set to `vec(K)` and output weights scaled by `weight_scale`,
    /// so the gain starts close to the constant `K`.
    pub fn set_base_gain(&mut self, k: &Matrix, weight_scale: f64) {
        assert_eq!((k.nrows(), k.ncols()), (self.m, self.n));
        let w = self.fc_out.w;
        for v in &mut self.store.values[w..w + self.fc_out.inputs * self.fc_out.outputs] {
            *v *= weight_scale;
        }
        let b = self.fc_out.b;
        for i in 0..self.m {
            for j in 0..self.n {
                self.store.values[b + i * self.n + j] = k[(i, j)];
            }
        }
    }

    pub fn obs_scale(&self) -> &[f64] {
        &self.store.values[self.obs_scale..self.obs_scale + self.n]
    }

    pub fn state_scale(&self) -> &[f64] {
        &self.store.values[self.state_scale..self.state_scale + self.m]
    }

    pub fn set_scales(&mut self, obs: &[f64], state: &[f64]) {
        self.store.values[self.obs_scale..self.obs_scale + self.n].copy_from_slice(obs);
        self.store.values[self.state_scale..self.state_scale + self.m].copy_from_slice(state);
    }

    pub fn initial_state<M: StateSpaceModel + ?Sized>(&self, model: &M) -> KnetState {
        KnetState {
            x_post: model.init().mean.clone(),
            x_prior: model.init().mean.clone(),
            hidden: Vector::zeros(self.hidden),
            started: false,
        }
    }
}

/// Tape-level handles for the recurrent state.
#[derive(Clone, Copy)]
pub(crate) struct StepVars {
    pub x_post: Var,
    pub x_prior: Var,
    pub hidden: Var,
}

pub(crate) struct StepRecord {
    pub vars: StepVars,
    pub gain: Var,
    pub innovation: Var,
    pub obs_pred: Var,
    pub state_diff: Vector,
}

/// `f` as a tape node with its Jacobian.
pub(crate) fn transition_on_tape<M: StateSpaceModel + ?Sized>(tape: &mut Tape, model: &M, x: Var) -> Var {
    let xv = tape.value(x).clone();
    let y = model.transition(&xv);
    let j = model.transition_jacobian(&xv);
    tape.local(y, vec![(x, j)])
}

pub(crate) fn observe_on_tape<M: StateSpaceModel + ?Sized>(tape: &mut Tape, model: &M, x: Var) -> Var {
    let xv = tape.value(x).clone();
    let y = model.observe(&xv);
    let j = model.observation_jacobian(&xv);
    tape.local(y, vec![(x, j)])
}

/// One filter step recorded on `tape`.
pub(crate) fn step_on_tape<M: StateSpaceModel + ?Sized>(
    tape: &mut Tape,
    model: &M,
    net: &KGainNet,
    prev: StepVars,
    started: bool,
    y: &Vector,
) -> Result<StepRecord> {
    let x_prior = transition_on_tape(tape, model, prev.x_post);
    let obs_pred = observe_on_tape(tape, model, x_prior);
    let yv = tape.input(y.clone());
    let innovation = tape.sub(yv, obs_pred);
    let state_diff = if started {
        tape.sub(prev.x_post, prev.x_prior)
    } else {
        tape.input(Vector::zeros(net.m))
    };
    // Scales are read through the tape so training sees the live values.
    let params = tape.params();
    let inv = |at: usize, len: usize| Vector::from_iterator(len, params[at..at + len].iter().map(|v| 1.0 / v));
    let obs_feat = tape.scale_shift(innovation, &inv(net.obs_scale, net.n), &Vector::zeros(net.n));
    let state_feat = tape.scale_shift(state_diff, &inv(net.state_scale, net.m), &Vector::zeros(net.m));
    let features = tape.concat(&[obs_feat, state_feat]);
    let a = fc_forward(tape, &net.fc_in, features, Activation::Relu)?;
    let hidden = gru_step(tape, &net.gru, a, prev.hidden)?;
    let gain = fc_forward(tape, &net.fc_out, hidden, Activation::Identity)?;
    let correction = tape.matvec(gain, innovation, net.m, net.n);
    let x_post = tape.add(x_prior, correction);
    if tape.value(x_post).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteEstimate { step: 0 });
    }
    let state_diff = tape.value(state_diff).clone();
    Ok(StepRecord {
        vars: StepVars {
            x_post,
            x_prior,
            hidden,
        },
        gain,
        innovation,
        obs_pred,
        state_diff,
    })
}

fn gain_matrix(v: &Vector, m: usize, n: usize) -> Matrix {
    Matrix::from_row_slice(m, n, v.as_slice())
}

/// One step: `x̂_{t|t-1} = f(x̂_{t-1})`, `ŷ = h(x̂_{t|t-1})`,
/// `x̂_t = x̂_{t|t-1} + K_t (y_t - ŷ)`.
pub fn knet_step<M: StateSpaceModel + ?Sized>(
    model: &M,
    net: &KGainNet,
    state: &mut KnetState,
    y: &Vector,
) -> Result<KnetStep> {
    if y.len() != net.n || model.obs_dim() != net.n || model.state_dim() != net.m {
        return Err(Error::ShapeMismatch(format!(
            "gain network is {}x{}, model is {}x{}, observation has {} entries",
            net.m,
            net.n,
            model.state_dim(),
            model.obs_dim(),
            y.len()
        )));
    }
    let mut tape = Tape::new(&net.store.values);
    let prev = StepVars {
        x_post: tape.input(state.x_post.clone()),
        x_prior: tape.input(state.x_prior.clone()),
        hidden: tape.input(state.hidden.clone()),
    };
    let rec = step_on_tape(&mut tape, model, net, prev, state.started, y)?;
    state.x_post = tape.value(rec.vars.x_post).clone();
    state.x_prior = tape.value(rec.vars.x_prior).clone();
    state.hidden = tape.value(rec.vars.hidden).clone();
    state.started = true;
    Ok(KnetStep {
        estimate: state.x_post.clone(),
        gain: gain_matrix(tape.value(rec.gain), net.m, net.n),
        obs_pred: tape.value(rec.obs_pred).clone(),
        features: KnetFeatures {
            obs_diff: tape.value(rec.innovation).clone(),
            state_diff: rec.state_diff,
        },
    })
}

/// `Σ_t ‖x̂_t - x_t‖²` over one sequence and its gradient in the trainable
/// parameters (zero for the frozen feature scales), by reverse mode
/// through every step.
pub fn knet_sequence_loss_gradient<M: StateSpaceModel + ?Sized>(
    model: &M,
    net: &KGainNet,
    obs: &[Vector],
    states: &[Vector],
) -> Result<(f64, Vec<f64>)> {
    if obs.len() != states.len() || obs.is_empty() {
        return Err(Error::ShapeMismatch(format!("{} observations for {} states", obs.len(), states.len())));
    }
    let loss = |tape: &mut Tape| -> Result<Var> {
        let init = net.initial_state(model);
        let mut vars = StepVars {
            x_post: tape.input(init.x_post.clone()),
            x_prior: tape.input(init.x_prior),
            hidden: tape.input(init.hidden),
        };
        let mut total: Option<Var> = None;
        for (t, (y, x)) in obs.iter().zip(states).enumerate() {
            let rec = step_on_tape(tape, model, net, vars, t > 0, y)?;
            let xv = tape.input(x.clone());
            let e = tape.sub(rec.vars.x_post, xv);
            let l = tape.sum_sq(e);
            total = Some(match total {
                Some(a) => tape.add(a, l),
                None => l,
            });
            vars = rec.vars;
        }
        Ok(total.expect("non-empty sequence"))
    };
    gradient_of(loss, &net.store)
}

/// Runs the filter over a whole observation sequence.
pub fn knet_filter<M: StateSpaceModel + ?Sized>(model: &M, net: &KGainNet, obs: &[Vector]) -> Result<KnetOutput> {
    let mut state = net.initial_state(model);
    let mut out = KnetOutput {
        means: Vec::with_capacity(obs.len()),
        gains: Vec::with_capacity(obs.len()),
        innovations: Vec::with_capacity(obs.len()),
    };
    for (t, y) in obs.iter().enumerate() {
        let s = knet_step(model, net, &mut state, y).map_err(|e| match e {
            Error::NonFiniteEstimate { .. } => Error::NonFiniteEstimate { step: t },
            e => e,
        })?;
        out.means.push(s.estimate);
        out.gains.push(s.gain);
        out.innovations.push(s.features.obs_diff);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::kf_filter;
    use crate::gaussmath::Gaussian;
    use crate::ssm::{simulate, LinearModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar() -> LinearModel {
        LinearModel::scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap()
    }

    #[test]
    fn steady_state_gain_reproduces_kf() {
        let model = scalar();
        let tr = simulate(&model, 400, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let kf = kf_filter(&model, &tr.obs).unwrap();
        let k_inf = kf.gains.as_ref().unwrap().last().unwrap().clone();
        let mut net = KGainNet::new(1, 1, 4, &mut ChaCha8Rng::seed_from_u64(0));
        net.set_constant_gain(&k_inf);

        // Start both from the KF estimate once the gain has converged.
        let start = 100;
        let mut state = net.initial_state(&model);
        state.x_post = kf.means[start - 1].clone();
        for t in start..400 {
            let s = knet_step(&model, &net, &mut state, &tr.obs[t]).unwrap();
            assert!((s.estimate[0] - kf.means[t][0]).abs() < 1e-8, "t={t}");
        }
    }

    #[test]
    fn zero_gain_is_open_loop() {
        let model = LinearModel::scalar(0.9, 1.0, 1.0, 1.0, 2.0, 1.0).unwrap();
        let mut net = KGainNet::new(1, 1, 4, &mut ChaCha8Rng::seed_from_u64(0));
        net.set_constant_gain(&Matrix::zeros(1, 1));
        let obs: Vec<Vector> = (0..5).map(|t| Vector::from_element(1, t as f64)).collect();
        let out = knet_filter(&model, &net, &obs).unwrap();
        for (t, x) in out.means.iter().enumerate() {
            assert!((x[0] - 2.0 * 0.9f64.powi(t as i32 + 1)).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_gain_tracks_observations() {
        let model = LinearModel::new(
            Matrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Gaussian::standard(2),
        )
        .unwrap();
        let tr = simulate(&model, 20, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut net = KGainNet::new(2, 2, 6, &mut ChaCha8Rng::seed_from_u64(0));
        net.set_constant_gain(&Matrix::identity(2, 2));
        let out = knet_filter(&model, &net, &tr.obs).unwrap();
        for (x, y) in out.means.iter().zip(&tr.obs) {
            assert!((x - y).amax() < 1e-12);
        }
    }

    #[test]
    fn update_is_affine_in_innovation() {
        let model = scalar();
        let net = KGainNet::new(1, 1, 5, &mut ChaCha8Rng::seed_from_u64(3));
        let mut state = net.initial_state(&model);
        for t in 0..20 {
            let y = Vector::from_element(1, (t as f64 * 0.7).sin() * 3.0);
            let prior = model.f[(0, 0)] * state.x_post[0];
            let s = knet_step(&model, &net, &mut state, &y).unwrap();
            let expected = s.gain[(0, 0)] * (y[0] - s.obs_pred[0]);
            assert!((s.estimate[0] - prior - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let net = KGainNet::new(3, 2, 7, &mut ChaCha8Rng::seed_from_u64(4));
        let ck = net.to_checkpoint(CheckpointMeta::default());
        assert_eq!(KGainNet::from_checkpoint(&ck).unwrap(), net);
    }
}
