//! Augmented physics-based model: `x' = φ₀ f(x) + φ₁ g(x; θ_dnn)` with the
//! parameters `θ = [φ₀, φ₁, θ_dnn]` estimated jointly with the state by an
//! EKF on the augmented vector `[x; θ]`.

mod train;

pub use train::{
    fixed_theta_model, run_apbm_online, train_apbm_offline, ApbmFit, ApbmOnlineOutput, ApbmTrainConfig,
};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gaussmath::{symmetrize_mut, Cholesky, Gaussian, Matrix, Vector};
use crate::nn::{fc_forward, Activation, Checkpoint, CheckpointMeta, Dense, ParamStore, Slice, Tape, Var};
use crate::ssm::{NonlinearModel, StateSpaceModel};

pub const METHOD: &str = "apbm";

/// Index of `φ₀` and `φ₁` in `θ`; the network weights follow.
pub const PHI0: usize = 0;
pub const PHI1: usize = 1;
pub const DNN_OFFSET: usize = 2;

/// Which part of `θ` the pseudo-observation pulls toward `θ̄`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    #[default]
    Full,
    MixingOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApbmConfig {
    pub hidden: usize,
    /// Network inputs are `input_scale · x`.
    pub input_scale: f64,
    /// Length of the optional exogenous input appended to the network input.
    pub exo_dim: usize,
    pub eta: f64,
    pub q_theta: f64,
    pub regularization: Regularization,
    /// Initial variance of `φ₀, φ₁`.
    pub mix_var: f64,
    /// Initial variance of the network weights.
    pub dnn_var: f64,
}

impl Default for ApbmConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            input_scale: 1.0,
            exo_dim: 0,
            eta: 1.0,
            q_theta: 1e-6,
            regularization: Regularization::Full,
            mix_var: 1e-2,
            dnn_var: 1e-2,
        }
    }
}

impl ApbmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("apbm hidden width must be positive".into()));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("q_theta", self.q_theta),
            ("mix_var", self.mix_var),
            ("dnn_var", self.dnn_var),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("apbm {name} must be finite and >= 0")));
            }
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return Err(Error::Config("apbm input_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer tanh network `g(x) = W₂ tanh(W₁ [s·x; d] + b₁) + b₂`.
#[derive(Debug, Clone, PartialEq)]
pub struct ApbmNet {
    pub store: ParamStore,
    pub m: usize,
    pub exo_dim: usize,
    pub input_scale: f64,
    fc1: Dense,
    fc2: Dense,
}

impl ApbmNet {
    pub fn new<R: Rng + ?Sized>(m: usize, exo_dim: usize, hidden: usize, input_scale: f64, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let fc1 = Dense::register(&mut store, "g.fc1", m + exo_dim, hidden, rng);
        let fc2 = Dense::register(&mut store, "g.fc2", hidden, m, rng);
        Self {
            store,
            m,
            exo_dim,
            input_scale,
            fc1,
            fc2,
        }
    }

    pub fn from_store(store: ParamStore, m: usize, input_scale: f64) -> Result<Self> {
        let fc1 = Dense::find(&store, "g.fc1")?;
        let fc2 = Dense::find(&store, "g.fc2")?;
        if fc1.inputs < m || fc2.outputs != m || fc2.inputs != fc1.outputs {
            return Err(Error::Config("apbm network layout does not match the state dimension".into()));
        }
        Ok(Self {
            exo_dim: fc1.inputs - m,
            store,
            m,
            input_scale,
            fc1,
            fc2,
        })
    }

    pub fn hidden(&self) -> usize {
        self.fc1.outputs
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    /// Records `g` on a tape whose parameters are the network weights.
    pub fn on_tape(&self, tape: &mut Tape, x: Var, exo: Option<&Vector>) -> Result<Var> {
        let scaled = tape.scale(x, self.input_scale);
        let input = match (exo, self.exo_dim) {
            (None, 0) => scaled,
            (Some(d), k) if d.len() == k => {
                let d = tape.input(d.clone());
                tape.concat(&[scaled, d])
            }
            _ => {
                return Err(Error::ShapeMismatch(format!(
                    "apbm network expects {} exogenous inputs",
                    self.exo_dim
                )))
            }
        };
        let a = fc_forward(tape, &self.fc1, input, Activation::Tanh)?;
        fc_forward(tape, &self.fc2, a, Activation::Identity)
    }

    /// `g(x; w)` for an explicit weight vector.
    pub fn eval(&self, weights: &[f64], x: &Vector, exo: Option<&Vector>) -> Result<Vector> {
        let mut tape = Tape::new(weights);
        let xv = tape.input(x.clone());
        let out = self.on_tape(&mut tape, xv, exo)?;
        Ok(tape.value(out).clone())
    }

    /// `(g, ∂g/∂x, ∂g/∂w)` by one reverse pass per output.
    pub fn eval_with_jacobians(&self, weights: &[f64], x: &Vector, exo: Option<&Vector>) -> Result<(Vector, Matrix, Matrix)> {
        let mut tape = Tape::new(weights);
        let xv = tape.input(x.clone());
        let out = self.on_tape(&mut tape, xv, exo)?;
        let m = self.m;
        let mut gx = Matrix::zeros(m, m);
        let mut gw = Matrix::zeros(m, weights.len());
        for i in 0..m {
            let grads = tape.backward_with_seed(out, Vector::from_fn(m, |k, _| if k == i { 1.0 } else { 0.0 }));
            gx.set_row(i, &grads.wrt(xv, m).transpose());
            for (j, g) in grads.params.iter().enumerate() {
                gw[(i, j)] = *g;
            }
        }
        Ok((tape.value(out).clone(), gx, gw))
    }
}

/// PBM, correction network and the noise/regularization settings.
#[derive(Debug, Clone)]
pub struct ApbmModel {
    pub pbm: NonlinearModel,
    pub net: ApbmNet,
    pub q_theta: Matrix,
    pub theta_bar: Vector,
    pub eta: f64,
    pub regularization: Regularization,
    /// Covariance of `θ` before any data.
    pub theta_prior_cov: Matrix,
}

impl ApbmModel {
    /// `θ̄ = [1, 0, w₀]` with `w₀` the network initialization.
    pub fn new<R: Rng + ?Sized>(pbm: NonlinearModel, cfg: &ApbmConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let m = pbm.state_dim();
        let net = ApbmNet::new(m, cfg.exo_dim, cfg.hidden, cfg.input_scale, rng);
        let d = DNN_OFFSET + net.param_count();
        let mut theta_bar = Vector::zeros(d);
        theta_bar[PHI0] = 1.0;
        theta_bar.rows_mut(DNN_OFFSET, d - DNN_OFFSET).copy_from_slice(&net.store.values);
        let theta_prior_cov = Matrix::from_diagonal(&Vector::from_fn(d, |i, _| {
            if i < DNN_OFFSET {
                cfg.mix_var
            } else {
                cfg.dnn_var
            }
        }));
        Ok(Self {
            pbm,
            net,
            q_theta: Matrix::identity(d, d) * cfg.q_theta,
            theta_bar,
            eta: cfg.eta,
            regularization: cfg.regularization,
            theta_prior_cov,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.pbm.state_dim()
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_bar.len()
    }

    /// Belief at the start of a sequence: the PBM initial state, `θ̄`, and
    /// the prior `θ` covariance.
    pub fn initial_belief(&self) -> AugmentedBelief {
        AugmentedBelief::new(self.pbm.init(), &self.theta_bar, &self.theta_prior_cov)
    }

    fn check_theta(&self, theta: &Vector) -> Result<()> {
        if theta.len() != self.theta_dim() {
            return Err(Error::ShapeMismatch(format!(
                "theta has {} entries, model expects {}",
                theta.len(),
                self.theta_dim()
            )));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, theta: &Vector, theta_cov_diag: &[f64], meta: CheckpointMeta) -> Result<Checkpoint> {
        self.check_theta(theta)?;
        let mut layout = vec![Slice {
            name: "mix".into(),
            offset: 0,
            shape: vec![2],
            trainable: true,
        }];
        layout.extend(self.net.store.layout().iter().map(|s| Slice {
            offset: s.offset + DNN_OFFSET,
            ..s.clone()
        }));
        let store = ParamStore::from_parts(layout, theta.as_slice().to_vec())?;
        Ok(Checkpoint::new(
            METHOD,
            &store,
            meta,
            json!({
                "m": self.state_dim(),
                "input_scale": self.net.input_scale,
                "eta": self.eta,
                "regularization": self.regularization,
                "q_theta": self.q_theta.diagonal().as_slice(),
                "theta_bar": self.theta_bar.as_slice(),
                "theta_prior_var": self.theta_prior_cov.diagonal().as_slice(),
                "theta_cov_diag": theta_cov_diag,
            }),
        ))
    }

    /// Rebuilds the model around `pbm` and returns it with the stored
    /// `θ` mean and covariance diagonal.
    pub fn from_checkpoint(ckpt: &Checkpoint, pbm: NonlinearModel) -> Result<(Self, Vector, Vec<f64>)> {
        ckpt.expect_method(METHOD)?;
        let store = ckpt.store()?;
        let arch = &ckpt.arch;
        let floats = |k: &str| -> Result<Vec<f64>> {
            arch.get(k)
                .and_then(|v| v.as_array())
                .and_then(|a| a.iter().map(|v| v.as_f64()).collect::<Option<Vec<_>>>())
                .ok_or_else(|| Error::Config(format!("checkpoint arch lacks {k:?}")))
        };
        let scalar = |k: &str| -> Result<f64> {
            arch.get(k)
                .and_then(|v| v.as_f64())
                .ok_or_else(|| Error::Config(format!("checkpoint arch lacks {k:?}")))
        };
        let m = pbm.state_dim();
        if arch.get("m").and_then(|v| v.as_u64()) != Some(m as u64) {
            return Err(Error::Config("checkpoint state dimension does not match the model".into()));
        }
        let net_layout: Vec<Slice> = store
            .layout()
            .iter()
            .filter(|s| s.name != "mix")
            .map(|s| Slice {
                offset: s.offset - DNN_OFFSET,
                ..s.clone()
            })
            .collect();
        let d = store.len();
        let theta_bar = Vector::from_vec(floats("theta_bar")?);
        if theta_bar.len() != d {
            return Err(Error::Config("checkpoint theta_bar has the wrong length".into()));
        }
        // The network's own store keeps the nominal weights; trained ones live in θ.
        let net_store = ParamStore::from_parts(net_layout, theta_bar.as_slice()[DNN_OFFSET..].to_vec())?;
        let net = ApbmNet::from_store(net_store, m, scalar("input_scale")?)?;
        let q_theta = floats("q_theta")?;
        let prior_var = floats("theta_prior_var")?;
        let cov_diag = floats("theta_cov_diag")?;
        if [theta_bar.len(), q_theta.len(), prior_var.len(), cov_diag.len()].iter().any(|&l| l != d) {
            return Err(Error::Config("checkpoint theta vectors have inconsistent lengths".into()));
        }
        let regularization = serde_json::from_value(arch.get("regularization").cloned().unwrap_or_default())
            .map_err(|e| Error::Config(format!("checkpoint regularization: {e}")))?;
        let model = Self {
            pbm,
            net,
            q_theta: Matrix::from_diagonal(&Vector::from_vec(q_theta)),
            theta_bar,
            eta: scalar("eta")?,
            regularization,
            theta_prior_cov: Matrix::from_diagonal(&Vector::from_vec(prior_var)),
        };
        Ok((model, Vector::from_vec(store.values), cov_diag))
    }
}

/// Joint Gaussian over `[x; θ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedBelief {
    pub mean: Vector,
    pub cov: Matrix,
    m: usize,
}

impl AugmentedBelief {
    /// Independent state and parameter blocks.
    pub fn new(x: &Gaussian, theta: &Vector, theta_cov: &Matrix) -> Self {
        let (m, d) = (x.dim(), theta.len());
        let mut mean = Vector::zeros(m + d);
        mean.rows_mut(0, m).copy_from(&x.mean);
        mean.rows_mut(m, d).copy_from(theta);
        let mut cov = Matrix::zeros(m + d, m + d);
        cov.view_mut((0, 0), (m, m)).copy_from(&x.cov);
        cov.view_mut((m, m), (d, d)).copy_from(theta_cov);
        Self { mean, cov, m }
    }

    /// `θ` known exactly.
    pub fn clamped(x: &Gaussian, theta: &Vector) -> Self {
        let d = theta.len();
        Self::new(x, theta, &Matrix::zeros(d, d))
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    pub fn theta_dim(&self) -> usize {
        self.mean.len() - self.m
    }

    pub fn x_mean(&self) -> Vector {
        self.mean.rows(0, self.m).into_owned()
    }

    pub fn x_cov(&self) -> Matrix {
        self.cov.view((0, 0), (self.m, self.m)).into_owned()
    }

    pub fn theta(&self) -> Vector {
        self.mean.rows(self.m, self.theta_dim()).into_owned()
    }

    pub fn theta_cov(&self) -> Matrix {
        let d = self.theta_dim();
        self.cov.view((self.m, self.m), (d, d)).into_owned()
    }

    /// Replaces the state block and drops its correlation with `θ`.
    pub fn reset_state(&mut self, x: &Gaussian) {
        let (m, d) = (self.m, self.theta_dim());
        self.mean.rows_mut(0, m).copy_from(&x.mean);
        self.cov.view_mut((0, 0), (m, m)).copy_from(&x.cov);
        self.cov.view_mut((0, m), (m, d)).fill(0.0);
        self.cov.view_mut((m, 0), (d, m)).fill(0.0);
    }
}

/// `φ₀ f(x) + φ₁ g(x; θ_dnn)`.
pub fn apbm_transition(model: &ApbmModel, x: &Vector, theta: &Vector) -> Result<Vector> {
    apbm_transition_with_input(model, x, theta, None)
}

pub fn apbm_transition_with_input(model: &ApbmModel, x: &Vector, theta: &Vector, exo: Option<&Vector>) -> Result<Vector> {
    model.check_theta(theta)?;
    if x.len() != model.state_dim() {
        return Err(Error::ShapeMismatch(format!("state has {} entries", x.len())));
    }
    let f = model.pbm.transition(x);
    let g = model.net.eval(&theta.as_slice()[DNN_OFFSET..], x, exo)?;
    let out = f * theta[PHI0] + g * theta[PHI1];
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    Ok(out)
}

/// Transition value with its Jacobians in `x` and in `θ`:
/// `J_x = φ₀ F_x + φ₁ G_x`, `J_θ = [f(x), g(x), φ₁ G_w]`.
pub fn apbm_transition_jacobians(
    model: &ApbmModel,
    x: &Vector,
    theta: &Vector,
    exo: Option<&Vector>,
) -> Result<(Vector, Matrix, Matrix)> {
    model.check_theta(theta)?;
    let (m, d) = (model.state_dim(), model.theta_dim());
    let (phi0, phi1) = (theta[PHI0], theta[PHI1]);
    let f = model.pbm.transition(x);
    let fx = model.pbm.transition_jacobian(x);
    let (g, gx, gw) = model.net.eval_with_jacobians(&theta.as_slice()[DNN_OFFSET..], x, exo)?;
    let value = &f * phi0 + &g * phi1;
    if value.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    let jx = fx * phi0 + gx * phi1;
    let mut jt = Matrix::zeros(m, d);
    jt.set_column(PHI0, &f);
    jt.set_column(PHI1, &g);
    jt.view_mut((0, DNN_OFFSET), (m, d - DNN_OFFSET)).copy_from(&(gw * phi1));
    Ok((value, jx, jt))
}

/// Measurement update on the coordinates `start..start+k` observed through
/// `hb` (identity when `None`), in the form `Σ - K S Kᵀ`.
fn block_update(
    mean: &mut Vector,
    cov: &mut Matrix,
    start: usize,
    k: usize,
    hb: Option<&Matrix>,
    innovation: &Vector,
    noise: &Matrix,
) -> Result<()> {
    let cols = cov.columns(start, k);
    let pht = match hb {
        Some(h) => cols * h.transpose(),
        None => cols.into_owned(),
    };
    let block = cov.view((start, start), (k, k));
    let mut s = match hb {
        Some(h) => h * block * h.transpose(),
        None => block.into_owned(),
    };
    s += noise;
    symmetrize_mut(&mut s);
    let chol = Cholesky::new(&s).map_err(|_| Error::NotPositiveDefinite {
        context: "augmented innovation covariance",
    })?;
    // With W = L⁻¹ (Σ Hᵀ)ᵀ: K S Kᵀ = Wᵀ W and K e = Wᵀ L⁻¹ e.
    let mut w = pht.transpose();
    chol.solve_lower_mut(&mut w);
    let mut e = Matrix::from_column_slice(innovation.len(), 1, innovation.as_slice());
    chol.solve_lower_mut(&mut e);
    *mean += w.tr_mul(&e).column(0);
    let wt = w.transpose();
    cov.gemm(-1.0, &wt, &w, 1.0);
    symmetrize_mut(cov);
    Ok(())
}

pub fn apbm_augmented_step(model: &ApbmModel, belief: &AugmentedBelief, y: &Vector) -> Result<AugmentedBelief> {
    apbm_augmented_step_with_input(model, belief, y, None)
}

/// One EKF predict/update on `[x; θ]`: `θ` follows a random walk with
/// covariance `Q_θ`, and the measurement stacks `y = h(x) + w` with the
/// pseudo-observation `θ̄ = θ + w_θ`, `w_θ ~ N(0, η⁻¹ I)`. `η = 0` drops the
/// pseudo rows.
pub fn apbm_augmented_step_with_input(
    model: &ApbmModel,
    belief: &AugmentedBelief,
    y: &Vector,
    exo: Option<&Vector>,
) -> Result<AugmentedBelief> {
    let (m, d) = (model.state_dim(), model.theta_dim());
    if belief.state_dim() != m || belief.theta_dim() != d {
        return Err(Error::ShapeMismatch("belief does not match the augmented model".into()));
    }
    if y.len() != model.pbm.obs_dim() {
        return Err(Error::ShapeMismatch(format!("observation has {} entries", y.len())));
    }
    let dim = m + d;
    let x = belief.x_mean();
    let theta = belief.theta();
    let (x_pred, jx, jt) = apbm_transition_jacobians(model, &x, &theta, exo)?;

    // Only the state rows of the transition Jacobian differ from identity.
    let mut j = Matrix::zeros(m, dim);
    j.view_mut((0, 0), (m, m)).copy_from(&jx);
    j.view_mut((0, m), (m, d)).copy_from(&jt);
    let jp = &j * &belief.cov;
    let mut cov = belief.cov.clone();
    let pxx = &jp * j.transpose() + model.pbm.process_cov();
    cov.view_mut((0, 0), (m, m)).copy_from(&pxx);
    let pxt = jp.columns(m, d).into_owned();
    cov.view_mut((0, m), (m, d)).copy_from(&pxt);
    cov.view_mut((m, 0), (d, m)).copy_from(&pxt.transpose());
    let mut ptt = cov.view_mut((m, m), (d, d));
    ptt += &model.q_theta;
    symmetrize_mut(&mut cov);
    let mut mean = belief.mean.clone();
    mean.rows_mut(0, m).copy_from(&x_pred);

    let y_pred = model.pbm.observe(&x_pred);
    let h = model.pbm.observation_jacobian(&x_pred);
    block_update(&mut mean, &mut cov, 0, m, Some(&h), &(y - y_pred), model.pbm.obs_cov())?;

    if model.eta > 0.0 {
        let k = match model.regularization {
            Regularization::Full => d,
            Regularization::MixingOnly => DNN_OFFSET,
        };
        let innovation = model.theta_bar.rows(0, k) - mean.rows(m, k);
        let noise = Matrix::identity(k, k) / model.eta;
        block_update(&mut mean, &mut cov, m, k, None, &innovation, &noise)?;
    }
    if mean.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteState);
    }
    Ok(AugmentedBelief { mean, cov, m })
}

/// The transition map `x ↦ φ₀ f(x) + φ₁ g(x; θ_dnn)` at a fixed `θ`, with
/// its analytic `x`-Jacobian.
pub(crate) fn fixed_theta_maps(model: &ApbmModel, theta: &Vector) -> (crate::ssm::VecMap, crate::ssm::JacMap) {
    let (f_model, net, theta) = (model.pbm.clone(), model.net.clone(), theta.clone());
    let (f_model2, net2, theta2) = (f_model.clone(), net.clone(), theta.clone());
    let f = Arc::new(move |x: &Vector| {
        let g = net
            .eval(&theta.as_slice()[DNN_OFFSET..], x, None)
            .unwrap_or_else(|_| Vector::from_element(x.len(), f64::NAN));
        f_model.transition(x) * theta[PHI0] + g * theta[PHI1]
    });
    let jf = Arc::new(move |x: &Vector| match net2.eval_with_jacobians(&theta2.as_slice()[DNN_OFFSET..], x, None) {
        Ok((_, gx, _)) => f_model2.transition_jacobian(x) * theta2[PHI0] + gx * theta2[PHI1],
        Err(_) => Matrix::from_element(x.len(), x.len(), f64::NAN),
    });
    (f, jf)
}
