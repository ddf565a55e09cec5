//! Lorenz-63 attractor: fine-step ground-truth generation with decimated
//! observations, and the coarse-step model available to filters.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Trajectory;
use super::model::NonlinearModel;
use crate::error::{Error, Result};
use crate::gaussmath::{standard_normal, Gaussian, Matrix, Vector};

pub const SIGMA: f64 = 10.0;
pub const RHO: f64 = 28.0;
pub const BETA: f64 = 8.0 / 3.0;

/// Trajectories whose state norm exceeds this are rejected.
pub const DIVERGENCE_NORM: f64 = 1e6;

#[inline]
pub fn lorenz_rhs(x: &[f64; 3]) -> [f64; 3] {
    [
        SIGMA * (x[1] - x[0]),
        x[0] * (RHO - x[2]) - x[1],
        x[0] * x[1] - BETA * x[2],
    ]
}

/// One classical 4th-order Runge–Kutta step.
#[inline]
pub fn rk4_step(x: &[f64; 3], dt: f64) -> [f64; 3] {
    let add = |a: &[f64; 3], b: &[f64; 3], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]];
    let k1 = lorenz_rhs(x);
    let k2 = lorenz_rhs(&add(x, &k1, 0.5 * dt));
    let k3 = lorenz_rhs(&add(x, &k2, 0.5 * dt));
    let k4 = lorenz_rhs(&add(x, &k3, dt));
    let w = dt / 6.0;
    [
        x[0] + w * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + w * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        x[2] + w * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2]),
    ]
}

/// Ground-truth generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzConfig {
    pub dt_fine: f64,
    pub decimation: usize,
    pub seq_len: usize,
    /// Observation noise variance per coordinate.
    pub r2: f64,
    /// Process perturbation variance per coordinate, applied at the
    /// decimated rate.
    pub q2: f64,
    pub init_mean: [f64; 3],
    pub init_var: f64,
}

impl Default for LorenzConfig {
    fn default() -> Self {
        Self {
            dt_fine: 1e-5,
            decimation: 2000,
            seq_len: 3000,
            r2: 1.0,
            q2: 0.0,
            init_mean: [1.0, 1.0, 1.0],
            init_var: 1.0,
        }
    }
}

impl LorenzConfig {
    /// Step of the decimated process.
    pub fn dt(&self) -> f64 {
        self.dt_fine * self.decimation as f64
    }

    pub fn init_belief(&self) -> Gaussian {
        Gaussian::isotropic(Vector::from_row_slice(&self.init_mean), self.init_var)
    }
}

/// Integrates the Lorenz ODE with RK4 at `dt_fine`, keeps every
/// `decimation`-th state, and observes `y_t = x_t + w_t`, `w_t ~ N(0, r2 I)`.
pub fn lorenz_generate<R: Rng + ?Sized>(cfg: &LorenzConfig, rng: &mut R) -> Result<Trajectory> {
    if !(cfg.dt_fine > 0.0) || cfg.decimation == 0 || cfg.seq_len == 0 {
        return Err(Error::InvalidArgument(
            "need dt_fine > 0, decimation >= 1 and seq_len >= 1".into(),
        ));
    }
    if cfg.r2 < 0.0 || cfg.q2 < 0.0 || cfg.init_var < 0.0 {
        return Err(Error::InvalidArgument("noise variances must be >= 0".into()));
    }
    let init_sd = cfg.init_var.sqrt();
    let z0 = standard_normal(3, rng);
    let mut x = [
        cfg.init_mean[0] + init_sd * z0[0],
        cfg.init_mean[1] + init_sd * z0[1],
        cfg.init_mean[2] + init_sd * z0[2],
    ];
    let (q_sd, r_sd) = (cfg.q2.sqrt(), cfg.r2.sqrt());
    let mut states = Vec::with_capacity(cfg.seq_len);
    let mut obs = Vec::with_capacity(cfg.seq_len);
    for t in 0..cfg.seq_len {
        for _ in 0..cfg.decimation {
            x = rk4_step(&x, cfg.dt_fine);
        }
        if cfg.q2 > 0.0 {
            let v = standard_normal(3, rng);
            for i in 0..3 {
                x[i] += q_sd * v[i];
            }
        }
        let norm = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::DivergedSimulation { step: t, norm });
        }
        let state = Vector::from_row_slice(&x);
        let y = if cfg.r2 > 0.0 {
            &state + standard_normal(3, rng) * r_sd
        } else {
            state.clone()
        };
        states.push(state);
        obs.push(y);
    }
    Ok(Trajectory {
        id: String::new(),
        dt: cfg.dt(),
        obs,
        states: Some(states),
    })
}

#[inline]
fn state_matrix(x1: f64) -> Matrix3<f64> {
    Matrix3::new(-SIGMA, SIGMA, 0.0, RHO, -1.0, -x1, 0.0, x1, -BETA)
}

/// Coarse-step transition `x ↦ Σ_{j=0}^{order} (Δt A(x))ʲ/j! · x` built on
/// the state-dependent form `ẋ = A(x) x` of the Lorenz equations.
pub fn taylor_transition(x: &Vector3<f64>, dt: f64, order: usize) -> Vector3<f64> {
    let a = state_matrix(x[0]) * dt;
    let mut term = *x;
    let mut out = *x;
    for j in 1..=order {
        term = a * term / j as f64;
        out += term;
    }
    out
}

/// Exact Jacobian of [`taylor_transition`].
///
/// `A(x)` depends on `x₁` only, through `∂A/∂x₁ = B`, so the Jacobian is
/// `M(x) + (∂M/∂x₁ · x) e₁ᵀ` with both series accumulated term by term.
pub fn taylor_jacobian(x: &Vector3<f64>, dt: f64, order: usize) -> Matrix3<f64> {
    let a = state_matrix(x[0]) * dt;
    let b = Matrix3::new(0.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.0, 1.0, 0.0) * dt;
    let mut term = Matrix3::identity();
    let mut dterm = Matrix3::zeros();
    let mut m = Matrix3::identity();
    let mut dm = Matrix3::zeros();
    for j in 1..=order {
        let jf = j as f64;
        dterm = (b * term + a * dterm) / jf;
        term = a * term / jf;
        m += term;
        dm += dterm;
    }
    let mut jac = m;
    let col = dm * x;
    for i in 0..3 {
        jac[(i, 0)] += col[i];
    }
    jac
}

fn to3(x: &Vector) -> Vector3<f64> {
    Vector3::new(x[0], x[1], x[2])
}

/// The filter-side Lorenz model: Taylor-discretized transition at `dt`,
/// full-state observation, analytic Jacobians.
pub fn lorenz_filter_model(dt: f64, order: usize, q: f64, r: f64, init: Gaussian) -> Result<NonlinearModel> {
    let f = Arc::new(move |x: &Vector| {
        let out = taylor_transition(&to3(x), dt, order);
        Vector::from_row_slice(out.as_slice())
    });
    let h = Arc::new(|x: &Vector| x.clone());
    let jf = Arc::new(move |x: &Vector| {
        let j = taylor_jacobian(&to3(x), dt, order);
        Matrix::from_column_slice(3, 3, j.as_slice())
    });
    let jh = Arc::new(|_: &Vector| Matrix::identity(3, 3));
    Ok(NonlinearModel::new(
        f,
        h,
        Matrix::identity(3, 3) * q,
        Matrix::identity(3, 3) * r,
        init,
    )?
    .with_jacobians(Some(jf), Some(jh)))
}
