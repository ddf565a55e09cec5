use kfbench_core::apbm::{run_apbm_online, ApbmConfig, ApbmModel};
use kfbench_core::gaussmath::{Gaussian, Matrix, Vector};
use kfbench_core::ssm::{LinearModel, NonlinearModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const T: usize = 4000;
const WINDOW: usize = 500;

fn noise(rng: &mut ChaCha8Rng, sd: f64) -> Vector {
    Vector::from_fn(2, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

#[test]
fn online_apbm_recovers_after_dynamics_switch() {
    let f = Matrix::from_row_slice(2, 2, &[0.78, 0.18, -0.18, 0.78]);
    let (q, r) = (0.05_f64, 0.2_f64);
    let pbm = LinearModel::new(
        f.clone(),
        Matrix::identity(2, 2),
        Matrix::identity(2, 2) * q,
        Matrix::identity(2, 2) * r,
        Gaussian::new(Vector::zeros(2), Matrix::identity(2, 2)).unwrap(),
    )
    .unwrap();
    let cfg = ApbmConfig { hidden: 8, eta: 0.01, mix_var: 0.1, dnn_var: 0.1, ..Default::default() };
    let model = ApbmModel::new(NonlinearModel::from_linear(&pbm), &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();

    let mut pre = 0.0;
    let mut post = 0.0;
    for run in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + run);
        let mut x = Vector::zeros(2);
        let (mut states, mut obs) = (Vec::with_capacity(T), Vec::with_capacity(T));
        for t in 0..T {
            let ft = if t < T / 2 { f.clone() } else { &f * 1.2 };
            x = ft * x + noise(&mut rng, q.sqrt());
            obs.push(&x + noise(&mut rng, r.sqrt()));
            states.push(x.clone());
        }
        let out = run_apbm_online(&model, &obs, &model.initial_belief()).unwrap();
        let window_mse = |from: usize| -> f64 {
            (from..from + WINDOW).map(|t| (&out.filter.means[t] - &states[t]).norm_squared()).sum::<f64>()
                / WINDOW as f64
        };
        pre += window_mse(T / 2 - WINDOW);
        post += window_mse(T / 2 + WINDOW);
    }
    let gap = 10.0 * (post / pre).log10();
    assert!(gap <= 1.0, "post-switch window is {gap:.3} dB above the pre-switch window");
}
