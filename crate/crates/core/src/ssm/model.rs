use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::gaussmath::{all_finite, is_symmetric, Cholesky, Gaussian, Matrix, Vector, SYMMETRY_TOL};

/// Vector-valued map `ℝᵃ → ℝᵇ`.
pub type VecMap = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
/// Jacobian of a [`VecMap`], `b × a`.
pub type JacMap = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;

/// Common view of linear and nonlinear additive-Gaussian state-space models.
pub trait StateSpaceModel {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn transition(&self, x: &Vector) -> Vector;
    fn transition_jacobian(&self, x: &Vector) -> Matrix;
    fn observe(&self, x: &Vector) -> Vector;
    fn observation_jacobian(&self, x: &Vector) -> Matrix;
    fn process_cov(&self) -> &Matrix;
    fn obs_cov(&self) -> &Matrix;
    fn init(&self) -> &Gaussian;
}

fn check_cov(name: &str, c: &Matrix, dim: usize) -> Result<()> {
    if c.nrows() != dim || c.ncols() != dim {
        return Err(Error::ShapeMismatch(format!(
            "{name} must be {dim}x{dim}, got {}x{}",
            c.nrows(),
            c.ncols()
        )));
    }
    if !all_finite(c) || !is_symmetric(c, SYMMETRY_TOL) {
        return Err(Error::InvalidArgument(format!(
            "{name} must be finite and symmetric"
        )));
    }
    Cholesky::with_jitter(c).map_err(|_| Error::NotPositiveDefinite { context: "noise covariance" })?;
    Ok(())
}

/// `x_{t+1} = F x_t + G u_t + v_t`, `y_t = H x_t + w_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub f: Matrix,
    pub g: Option<Matrix>,
    pub h: Matrix,
    pub q: Matrix,
    pub r: Matrix,
    pub init: Gaussian,
}

impl LinearModel {
    pub fn new(f: Matrix, h: Matrix, q: Matrix, r: Matrix, init: Gaussian) -> Result<Self> {
        let m = f.nrows();
        if m == 0 || !f.is_square() {
            return Err(Error::ShapeMismatch("F must be square and non-empty".into()));
        }
        if h.ncols() != m || h.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "H must have {m} columns, got {}x{}",
                h.nrows(),
                h.ncols()
            )));
        }
        if init.dim() != m {
            return Err(Error::ShapeMismatch("initial belief has wrong dimension".into()));
        }
        check_cov("Q", &q, m)?;
        check_cov("R", &r, h.nrows())?;
        if !all_finite(&f) || !all_finite(&h) {
            return Err(Error::InvalidArgument("F and H must be finite".into()));
        }
        Ok(Self {
            f,
            g: None,
            h,
            q,
            r,
            init,
        })
    }

    /// Scalar model `x' = a x + v`, `y = c x + w`.
    pub fn scalar(a: f64, c: f64, q: f64, r: f64, init_mean: f64, init_var: f64) -> Result<Self> {
        let one = |v: f64| Matrix::from_element(1, 1, v);
        Self::new(
            one(a),
            one(c),
            one(q),
            one(r),
            Gaussian::new(Vector::from_element(1, init_mean), one(init_var))?,
        )
    }

    /// Attaches a known input map `G` (inputs enter as the bias `G u_t`).
    pub fn with_input(mut self, g: Matrix) -> Result<Self> {
        if g.nrows() != self.f.nrows() {
            return Err(Error::ShapeMismatch("G must have as many rows as F".into()));
        }
        self.g = Some(g);
        Ok(self)
    }

    pub(crate) fn input_bias(&self, u: Option<&Vector>) -> Result<Option<Vector>> {
        match (u, &self.g) {
            (None, _) => Ok(None),
            (Some(_), None) => Err(Error::InvalidArgument(
                "input supplied to a model without an input map".into(),
            )),
            (Some(u), Some(g)) => {
                if u.len() != g.ncols() {
                    return Err(Error::ShapeMismatch("input length does not match G".into()));
                }
                Ok(Some(g * u))
            }
        }
    }
}

impl StateSpaceModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }
    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }
    fn transition(&self, x: &Vector) -> Vector {
        &self.f * x
    }
    fn transition_jacobian(&self, _x: &Vector) -> Matrix {
        self.f.clone()
    }
    fn observe(&self, x: &Vector) -> Vector {
        &self.h * x
    }
    fn observation_jacobian(&self, _x: &Vector) -> Matrix {
        self.h.clone()
    }
    fn process_cov(&self) -> &Matrix {
        &self.q
    }
    fn obs_cov(&self) -> &Matrix {
        &self.r
    }
    fn init(&self) -> &Gaussian {
        &self.init
    }
}

/// `x_{t+1} = f(x_t) + v_t`, `y_t = h(x_t) + w_t` with Gaussian noises.
///
/// Jacobians fall back to central differences when no analytic map is set.
#[derive(Clone)]
pub struct NonlinearModel {
    state_dim: usize,
    obs_dim: usize,
    f: VecMap,
    h: VecMap,
    jac_f: Option<JacMap>,
    jac_h: Option<JacMap>,
    pub q: Matrix,
    pub r: Matrix,
    pub init: Gaussian,
}

impl fmt::Debug for NonlinearModel {
    fn fmt(&self, fm: &mut fmt::Formatter<'_>) -> fmt::Result {
        fm.debug_struct("NonlinearModel")
            .field("state_dim", &self.state_dim)
            .field("obs_dim", &self.obs_dim)
            .field("analytic_jac_f", &self.jac_f.is_some())
            .field("analytic_jac_h", &self.jac_h.is_some())
            .field("q", &self.q)
            .field("r", &self.r)
            .field("init", &self.init)
            .finish()
    }
}

impl NonlinearModel {
    pub fn new(
        f: VecMap,
        h: VecMap,
        q: Matrix,
        r: Matrix,
        init: Gaussian,
    ) -> Result<Self> {
        let m = init.dim();
        check_cov("Q", &q, m)?;
        let n = r.nrows();
        check_cov("R", &r, n)?;
        let probe = h(&init.mean);
        if probe.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "h maps to {} entries but R is {n}x{n}",
                probe.len()
            )));
        }
        if f(&init.mean).len() != m {
            return Err(Error::ShapeMismatch("f does not preserve the state dimension".into()));
        }
        Ok(Self {
            state_dim: m,
            obs_dim: n,
            f,
            h,
            jac_f: None,
            jac_h: None,
            q,
            r,
            init,
        })
    }

    pub fn with_jacobians(mut self, jac_f: Option<JacMap>, jac_h: Option<JacMap>) -> Self {
        self.jac_f = jac_f;
        self.jac_h = jac_h;
        self
    }

    /// The linear model viewed through the nonlinear interface, with exact
    /// Jacobians.
    pub fn from_linear(lin: &LinearModel) -> Self {
        let (fm, hm) = (lin.f.clone(), lin.h.clone());
        let (fj, hj) = (lin.f.clone(), lin.h.clone());
        Self {
            state_dim: lin.state_dim(),
            obs_dim: lin.obs_dim(),
            f: Arc::new(move |x| &fm * x),
            h: Arc::new(move |x| &hm * x),
            jac_f: Some(Arc::new(move |_| fj.clone())),
            jac_h: Some(Arc::new(move |_| hj.clone())),
            q: lin.q.clone(),
            r: lin.r.clone(),
            init: lin.init.clone(),
        }
    }

    pub fn has_analytic_jacobians(&self) -> (bool, bool) {
        (self.jac_f.is_some(), self.jac_h.is_some())
    }

    /// Copy of this model that ignores any analytic Jacobians.
    pub fn numeric_only(&self) -> Self {
        let mut m = self.clone();
        m.jac_f = None;
        m.jac_h = None;
        m
    }

    pub fn f_map(&self) -> &VecMap {
        &self.f
    }

    pub fn h_map(&self) -> &VecMap {
        &self.h
    }
}

impl StateSpaceModel for NonlinearModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn obs_dim(&self) -> usize {
        self.obs_dim
    }
    fn transition(&self, x: &Vector) -> Vector {
        (self.f)(x)
    }
    fn transition_jacobian(&self, x: &Vector) -> Matrix {
        match &self.jac_f {
            Some(j) => j(x),
            None => numeric_jacobian(self.f.as_ref(), x),
        }
    }
    fn observe(&self, x: &Vector) -> Vector {
        (self.h)(x)
    }
    fn observation_jacobian(&self, x: &Vector) -> Matrix {
        match &self.jac_h {
            Some(j) => j(x),
            None => numeric_jacobian(self.h.as_ref(), x),
        }
    }
    fn process_cov(&self) -> &Matrix {
        &self.q
    }
    fn obs_cov(&self) -> &Matrix {
        &self.r
    }
    fn init(&self) -> &Gaussian {
        &self.init
    }
}

/// Central-difference Jacobian with per-coordinate step
/// `max(1e-6, 1e-6·|x_i|)`.
pub fn numeric_jacobian(fun: &(dyn Fn(&Vector) -> Vector + Send + Sync), x: &Vector) -> Matrix {
    let base = fun(x);
    let mut jac = Matrix::zeros(base.len(), x.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let step = (1e-6 * x[i].abs()).max(1e-6);
        let xi = x[i];
        xp[i] = xi + step;
        let fp = fun(&xp);
        xp[i] = xi - step;
        let fm = fun(&xp);
        xp[i] = xi;
        jac.set_column(i, &((fp - fm) / (2.0 * step)));
    }
    jac
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_jacobian_of_quadratic() {
        let f = |x: &Vector| Vector::from_vec(vec![x[0] * x[1], x[0] * x[0] + 3.0 * x[1]]);
        let x = Vector::from_vec(vec![1.5, -2.0]);
        let j = numeric_jacobian(&f, &x);
        let exact = Matrix::from_row_slice(2, 2, &[-2.0, 1.5, 3.0, 3.0]);
        assert!((j - exact).amax() < 1e-8);
    }

    #[test]
    fn linear_model_validation() {
        let init = Gaussian::standard(2);
        let bad = LinearModel::new(
            Matrix::identity(2, 2),
            Matrix::identity(3, 3),
            Matrix::identity(2, 2),
            Matrix::identity(3, 3),
            init.clone(),
        );
        assert!(matches!(bad, Err(Error::ShapeMismatch(_))));
        let indefinite = LinearModel::new(
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]),
            Matrix::identity(2, 2),
            init,
        );
        assert!(matches!(indefinite, Err(Error::NotPositiveDefinite { .. })));
    }

    #[test]
    fn from_linear_matches_linear() {
        let lin = LinearModel::new(
            Matrix::from_row_slice(2, 2, &[0.9, 0.1, 0.0, 0.8]),
            Matrix::from_row_slice(1, 2, &[1.0, 0.5]),
            Matrix::identity(2, 2) * 0.1,
            Matrix::identity(1, 1),
            Gaussian::standard(2),
        )
        .unwrap();
        let nl = NonlinearModel::from_linear(&lin);
        let x = Vector::from_vec(vec![0.3, -1.2]);
        assert_eq!(nl.transition(&x), lin.transition(&x));
        assert_eq!(nl.observe(&x), lin.observe(&x));
        assert_eq!(nl.transition_jacobian(&x), lin.f);
        let numeric = nl.numeric_only().transition_jacobian(&x);
        assert!((numeric - &lin.f).amax() < 1e-9);
    }
}
