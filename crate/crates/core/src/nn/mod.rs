//! Reverse-mode differentiation, layers, and optimizer.

mod adam;
mod checkpoint;
mod layers;
mod params;
mod tape;
mod train;

pub use adam::{adam_step, clip_grad_norm, AdamState};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use layers::{fc_forward, gru_step, Activation, Dense, Gru};
pub use params::{Init, ParamStore, Slice};
pub use tape::{Gradients, Tape, Var};
pub use train::{fit, EpochStats, FitReport, TrainConfig, WindowObjective};

use crate::error::{Error, Result};

/// Default gradient-norm clip applied before every optimizer step.
pub const GRAD_CLIP: f64 = 10.0;
/// Default truncation window for backpropagation through time.
pub const BPTT_WINDOW: usize = 30;

/// Evaluates a scalar loss on a fresh tape and returns `(loss, ∂loss/∂θ)`.
pub fn gradient_of<F>(loss_eval: F, params: &ParamStore) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new(&params.values);
    let out = loss_eval(&mut tape)?;
    if tape.value(out).len() != 1 {
        return Err(Error::ShapeMismatch("loss must be a scalar".into()));
    }
    let loss = tape.scalar(out);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    let mut grad = tape.backward(out).params;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteLoss);
    }
    params.mask_frozen(&mut grad);
    Ok((loss, grad))
}

/// Fourth-order central-difference gradient of `f` at `x`, with step
/// `h · max(1, |x_i|)`.
pub fn finite_difference_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    let at = |p: &mut Vec<f64>, i: usize, v: f64, f: &mut F| {
        p[i] = v;
        f(p)
    };
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            let f2 = at(&mut p, i, x[i] + 2.0 * step, &mut f);
            let f1 = at(&mut p, i, x[i] + step, &mut f);
            let b1 = at(&mut p, i, x[i] - step, &mut f);
            let b2 = at(&mut p, i, x[i] - 2.0 * step, &mut f);
            p[i] = x[i];
            (8.0 * (f1 - b1) - (f2 - b2)) / (12.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, 1e-4)`; the floor keeps near-zero partials from
/// dominating gradient checks.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmath::Vector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let store = ParamStore::from_parts(
            vec![Slice {
                name: "p".into(),
                offset: 0,
                shape: vec![1],
                trainable: true,
            }],
            vec![3.0],
        )
        .unwrap();
        let (loss, grad) = gradient_of(
            |t| {
                let p = t.param(0, 1);
                Ok(t.mul(p, p))
            },
            &store,
        )
        .unwrap();
        assert_eq!((loss, grad), (9.0, vec![6.0]));
    }

    #[test]
    fn sum_of_sines() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        store.add("p", &[7], Init::FanIn(1), &mut rng);
        let (_, grad) = gradient_of(
            |t| {
                let p = t.param(0, 7);
                let s = t.sin(p);
                Ok(t.sum(s))
            },
            &store,
        )
        .unwrap();
        for (g, p) in grad.iter().zip(&store.values) {
            assert!((g - p.cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let l1 = Dense::register(&mut store, "l1", 3, 8, &mut rng);
        let l2 = Dense::register(&mut store, "l2", 8, 2, &mut rng);
        for v in store.values.iter_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
        let x = Vector::from_vec(vec![0.4, -1.3, 2.0]);
        let target = Vector::from_vec(vec![1.0, -0.5]);
        let loss = |t: &mut Tape| {
            let xv = t.input(x.clone());
            let h = fc_forward(t, &l1, xv, Activation::Tanh)?;
            let y = fc_forward(t, &l2, h, Activation::Identity)?;
            let tv = t.input(target.clone());
            let e = t.sub(y, tv);
            Ok(t.sum_sq(e))
        };
        let (_, grad) = gradient_of(loss, &store).unwrap();
        let fd = finite_difference_gradient(
            |p| {
                let mut t = Tape::new(p);
                let o = loss(&mut t).unwrap();
                t.scalar(o)
            },
            &store.values,
            1e-5,
        );
        for (a, b) in grad.iter().zip(&fd) {
            assert!(rel_err(*a, *b) <= 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let store = ParamStore::from_parts(
            vec![Slice {
                name: "p".into(),
                offset: 0,
                shape: vec![1],
                trainable: true,
            }],
            vec![1000.0],
        )
        .unwrap();
        let r = gradient_of(
            |t| {
                let p = t.param(0, 1);
                let e = t.exp(p);
                Ok(t.sum(e))
            },
            &store,
        );
        assert!(matches!(r, Err(Error::NonFiniteLoss)));
    }
}
