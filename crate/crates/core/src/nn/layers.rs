use rand::Rng;

use super::params::{Init, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

/// Fully connected layer `act(W x + b)`, `W` stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[outputs, inputs], Init::FanIn(inputs), rng);
        let b = store.add(&format!("{name}.b"), &[outputs], Init::Zeros, rng);
        Self { w, b, inputs, outputs }
    }

    /// Locates an already-registered layer by name.
    pub fn find(store: &ParamStore, name: &str) -> Result<Self> {
        let w = store
            .slice(&format!("{name}.w"))
            .ok_or_else(|| Error::Config(format!("missing layer {name:?}")))?;
        let b = store.offset(&format!("{name}.b"))?;
        if w.shape.len() != 2 {
            return Err(Error::Config(format!("layer {name:?} weight is not a matrix")));
        }
        Ok(Self {
            w: w.offset,
            b,
            inputs: w.shape[1],
            outputs: w.shape[0],
        })
    }

    pub fn param_count(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

pub fn fc_forward(tape: &mut Tape, layer: &Dense, x: Var, act: Activation) -> Result<Var> {
    let n = tape.value(x).len();
    if n != layer.inputs || layer.b + layer.outputs > tape.params().len() {
        return Err(Error::ShapeMismatch(format!(
            "dense layer expects {} inputs, got {n}",
            layer.inputs
        )));
    }
    let y = tape.affine(layer.w, Some(layer.b), layer.outputs, layer.inputs, x);
    Ok(match act {
        Activation::Identity => y,
        Activation::Relu => tape.relu(y),
        Activation::Tanh => tape.tanh(y),
    })
}

/// GRU cell. The three input maps are stacked as `W_x = [W_z; W_r; W_h]`
/// with a shared bias `[b_z; b_r; b_h]`; the recurrent maps as
/// `U_zr = [U_z; U_r]` and `U_h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gru {
    pub w_x: usize,
    pub b: usize,
    pub u_zr: usize,
    pub u_h: usize,
    pub inputs: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let w_x = store.add(&format!("{name}.w_x"), &[3 * hidden, inputs], Init::FanIn(inputs), rng);
        let b = store.add(&format!("{name}.b"), &[3 * hidden], Init::Zeros, rng);
        let u_zr = store.add(&format!("{name}.u_zr"), &[2 * hidden, hidden], Init::FanIn(hidden), rng);
        let u_h = store.add(&format!("{name}.u_h"), &[hidden, hidden], Init::FanIn(hidden), rng);
        Self {
            w_x,
            b,
            u_zr,
            u_h,
            inputs,
            hidden,
        }
    }

    pub fn find(store: &ParamStore, name: &str) -> Result<Self> {
        let w_x = store
            .slice(&format!("{name}.w_x"))
            .ok_or_else(|| Error::Config(format!("missing GRU {name:?}")))?;
        if w_x.shape.len() != 2 || w_x.shape[0] % 3 != 0 {
            return Err(Error::Config(format!("GRU {name:?} has a malformed input map")));
        }
        Ok(Self {
            w_x: w_x.offset,
            b: store.offset(&format!("{name}.b"))?,
            u_zr: store.offset(&format!("{name}.u_zr"))?,
            u_h: store.offset(&format!("{name}.u_h"))?,
            inputs: w_x.shape[1],
            hidden: w_x.shape[0] / 3,
        })
    }
}

/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `ĥ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = z ⊙ h + (1 - z) ⊙ ĥ`.
pub fn gru_step(tape: &mut Tape, gru: &Gru, x: Var, h: Var) -> Result<Var> {
    let (nx, nh) = (tape.value(x).len(), tape.value(h).len());
    if nx != gru.inputs || nh != gru.hidden {
        return Err(Error::ShapeMismatch(format!(
            "GRU expects input {} and state {}, got {nx} and {nh}",
            gru.inputs, gru.hidden
        )));
    }
    let hd = gru.hidden;
    let ax = tape.affine(gru.w_x, Some(gru.b), 3 * hd, gru.inputs, x);
    let ah = tape.affine(gru.u_zr, None, 2 * hd, hd, h);
    let ax_zr = tape.slice(ax, 0, 2 * hd);
    let pre_zr = tape.add(ax_zr, ah);
    let zr = tape.sigmoid(pre_zr);
    let z = tape.slice(zr, 0, hd);
    let r = tape.slice(zr, hd, hd);
    let rh = tape.mul(r, h);
    let uh = tape.affine(gru.u_h, None, hd, hd, rh);
    let ax_h = tape.slice(ax, 2 * hd, hd);
    let pre_h = tape.add(ax_h, uh);
    let cand = tape.tanh(pre_h);
    let keep = tape.mul(z, h);
    let one_minus_z = tape.one_minus(z);
    let fresh = tape.mul(one_minus_z, cand);
    Ok(tape.add(keep, fresh))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmath::Vector;
    use crate::nn::{finite_difference_gradient, gradient_of, rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = Dense::register(&mut store, "fc", 2, 2, &mut rng);
        store.values[d.w..d.w + 4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new(&store.values);
        let x = tape.input(Vector::from_vec(vec![-1.0, 2.0]));
        let y = fc_forward(&mut tape, &d, x, Activation::Identity).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[-1.0, 2.0]);
        let y = fc_forward(&mut tape, &d, x, Activation::Relu).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[0.0, 2.0]);

        store.values[d.w..d.w + 4].fill(0.0);
        store.values[d.b..d.b + 2].copy_from_slice(&[3.0, -4.0]);
        let mut tape = Tape::new(&store.values);
        let x = tape.input(Vector::from_vec(vec![5.0, 6.0]));
        let y = fc_forward(&mut tape, &d, x, Activation::Identity).unwrap();
        assert_eq!(tape.value(y).as_slice(), &[3.0, -4.0]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let d = Dense::register(&mut store, "fc", 3, 2, &mut rng);
        let mut tape = Tape::new(&store.values);
        let x = tape.input(Vector::zeros(2));
        assert!(matches!(
            fc_forward(&mut tape, &d, x, Activation::Tanh),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let g = Gru::register(&mut store, "gru", 2, 3, &mut rng);
        store.values.fill(0.0);
        let mut tape = Tape::new(&store.values);
        let x = tape.input(Vector::from_vec(vec![0.3, -2.0]));
        let h = tape.input(Vector::from_vec(vec![1.0, -4.0, 0.5]));
        let h1 = gru_step(&mut tape, &g, x, h).unwrap();
        assert_eq!(tape.value(h1).as_slice(), &[0.5, -2.0, 0.25]);
        let h0 = tape.input(Vector::zeros(3));
        let h1 = gru_step(&mut tape, &g, x, h0).unwrap();
        assert_eq!(tape.value(h1).as_slice(), &[0.0; 3]);
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let g = Gru::register(&mut store, "gru", 2, 4, &mut rng);
        for v in store.values.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        let x = Vector::from_vec(vec![0.7, -1.1]);
        let h = Vector::from_vec(vec![0.2, -0.4, 0.9, 0.1]);
        let loss = |tape: &mut Tape| {
            let xv = tape.input(x.clone());
            let hv = tape.input(h.clone());
            let h1 = gru_step(tape, &g, xv, hv)?;
            let h2 = gru_step(tape, &g, xv, h1)?;
            Ok(tape.sum_sq(h2))
        };
        let (_, grad) = gradient_of(loss, &store).unwrap();
        let fd = finite_difference_gradient(
            |p| {
                let mut tape = Tape::new(p);
                let out = loss(&mut tape).unwrap();
                tape.scalar(out)
            },
            &store.values,
            1e-5,
        );
        for (a, b) in grad.iter().zip(&fd) {
            assert!(rel_err(*a, *b) <= 1e-5, "{a} vs {b}");
        }
    }
}
