use rand::Rng;

use super::dataset::Trajectory;
use super::model::{LinearModel, StateSpaceModel};
use crate::error::{Error, Result};
use crate::gaussmath::{psd_sqrt, sample_with_sqrt, Vector};

/// Draws `x_0 ~ init`, then `T` steps of `x_{t+1} = f(x_t) + v_t` and
/// `y_t = h(x_t) + w_t`. Returned states are `x_1..x_T`.
pub fn simulate<M, R>(model: &M, steps: usize, rng: &mut R) -> Result<Trajectory>
where
    M: StateSpaceModel + ?Sized,
    R: Rng + ?Sized,
{
    simulate_inner(model, steps, None, rng)
}

/// [`simulate`] for a linear model driven by a known input sequence.
pub fn simulate_with_input<R: Rng + ?Sized>(
    model: &LinearModel,
    inputs: &[Vector],
    rng: &mut R,
) -> Result<Trajectory> {
    let biases = inputs
        .iter()
        .map(|u| model.input_bias(Some(u)).map(|b| b.expect("input map present")))
        .collect::<Result<Vec<_>>>()?;
    simulate_inner(model, inputs.len(), Some(&biases), rng)
}

fn simulate_inner<M, R>(
    model: &M,
    steps: usize,
    biases: Option<&[Vector]>,
    rng: &mut R,
) -> Result<Trajectory>
where
    M: StateSpaceModel + ?Sized,
    R: Rng + ?Sized,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("simulation needs T >= 1".into()));
    }
    let q_sqrt = psd_sqrt(model.process_cov())?;
    let r_sqrt = psd_sqrt(model.obs_cov())?;
    let init_sqrt = psd_sqrt(&model.init().cov)?;
    let zero_x = Vector::zeros(model.state_dim());
    let zero_y = Vector::zeros(model.obs_dim());

    let mut x = sample_with_sqrt(&model.init().mean, &init_sqrt, rng);
    let mut states = Vec::with_capacity(steps);
    let mut obs = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut next = model.transition(&x) + sample_with_sqrt(&zero_x, &q_sqrt, rng);
        if let Some(b) = biases {
            next += &b[t];
        }
        x = next;
        let y = model.observe(&x) + sample_with_sqrt(&zero_y, &r_sqrt, rng);
        states.push(x.clone());
        obs.push(y);
    }
    Ok(Trajectory {
        id: String::new(),
        dt: 1.0,
        obs,
        states: Some(states),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmath::{Gaussian, Matrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_noise_identity_is_constant() {
        let c = Vector::from_vec(vec![1.5, -0.5]);
        let model = LinearModel::new(
            Matrix::identity(2, 2),
            Matrix::identity(2, 2),
            Matrix::zeros(2, 2),
            Matrix::zeros(2, 2),
            Gaussian {
                mean: c.clone(),
                cov: Matrix::zeros(2, 2),
            },
        )
        .unwrap();
        let tr = simulate(&model, 20, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (x, y) in tr.states.as_ref().unwrap().iter().zip(&tr.obs) {
            assert_eq!(x, &c);
            assert_eq!(y, &c);
        }
    }

    #[test]
    fn ar1_stationary_variance() {
        let model = LinearModel::scalar(0.9, 1.0, 1.0, 1.0, 0.0, 1.0 / 0.19).unwrap();
        let tr = simulate(&model, 100_000, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let xs: Vec<f64> = tr.states.unwrap().iter().map(|x| x[0]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        let expected = 1.0 / (1.0 - 0.81);
        assert!((var - expected).abs() / expected < 0.05, "var {var}");
    }

    #[test]
    fn same_seed_same_trajectory() {
        let model = LinearModel::scalar(0.7, 2.0, 0.5, 0.3, 1.0, 1.0).unwrap();
        let a = simulate(&model, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = simulate(&model, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_zero_length() {
        let model = LinearModel::scalar(0.7, 1.0, 1.0, 1.0, 0.0, 1.0).unwrap();
        assert!(simulate(&model, 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn input_enters_as_bias() {
        let model = LinearModel::new(
            Matrix::identity(1, 1),
            Matrix::identity(1, 1),
            Matrix::zeros(1, 1),
            Matrix::zeros(1, 1),
            Gaussian {
                mean: Vector::zeros(1),
                cov: Matrix::zeros(1, 1),
            },
        )
        .unwrap()
        .with_input(Matrix::from_element(1, 1, 2.0))
        .unwrap();
        let inputs: Vec<Vector> = (0..3).map(|_| Vector::from_element(1, 1.0)).collect();
        let tr = simulate_with_input(&model, &inputs, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let xs: Vec<f64> = tr.states.unwrap().iter().map(|x| x[0]).collect();
        assert_eq!(xs, vec![2.0, 4.0, 6.0]);
    }
}
