use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussmath::Vector;

/// Floor applied to per-sequence dB values (a perfect estimate would be -inf).
pub const DB_FLOOR: f64 = -300.0;

/// Per-sequence MSE in dB and its summary for one method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub per_sequence_db: Vec<f64>,
    pub mean_db: f64,
    /// Sample standard deviation over sequences (0 for a single sequence).
    pub std_db: f64,
    pub wall_clock_secs: f64,
    pub config_hash: String,
}

impl MetricReport {
    /// Equality ignoring the wall-clock time.
    pub fn same_result(&self, other: &Self) -> bool {
        self.method == other.method
            && self.per_sequence_db == other.per_sequence_db
            && self.mean_db == other.mean_db
            && self.std_db == other.std_db
            && self.config_hash == other.config_hash
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Schema {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn to_db(mse: f64) -> f64 {
    if mse > 0.0 {
        (10.0 * mse.log10()).max(DB_FLOOR)
    } else {
        DB_FLOOR
    }
}

/// `(mean, sample std)`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per sequence `10 log10( Σ_t ‖x̂_t - x_t‖² / (T m) )`, floored at
/// [`DB_FLOOR`], with mean and sample std across sequences. `method`,
/// timing and hash are left for the caller to fill in.
pub fn mse_db(estimates: &[Vec<Vector>], truth: &[Vec<Vector>]) -> Result<MetricReport> {
    if estimates.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} estimated sequences for {} true ones",
            estimates.len(),
            truth.len()
        )));
    }
    if estimates.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut per_sequence_db = Vec::with_capacity(truth.len());
    for (i, (est, tru)) in estimates.iter().zip(truth).enumerate() {
        if est.len() != tru.len() || tru.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "sequence {i}: {} estimates for {} states",
                est.len(),
                tru.len()
            )));
        }
        let m = tru[0].len();
        let mut sum = 0.0;
        for (a, b) in est.iter().zip(tru) {
            if a.len() != m || b.len() != m {
                return Err(Error::ShapeMismatch(format!("sequence {i}: state dimension changes")));
            }
            sum += (a - b).norm_squared();
        }
        per_sequence_db.push(to_db(sum / (tru.len() * m) as f64));
    }
    let (mean_db, std_db) = mean_std(&per_sequence_db);
    Ok(MetricReport {
        method: String::new(),
        per_sequence_db,
        mean_db,
        std_db,
        wall_clock_secs: 0.0,
        config_hash: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussmath::standard_normal;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seqs(k: usize, t: usize, m: usize, seed: u64) -> Vec<Vec<Vector>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..k).map(|_| (0..t).map(|_| standard_normal(m, &mut rng) * 5.0).collect()).collect()
    }

    #[test]
    fn perfect_estimate_hits_floor() {
        let truth = seqs(3, 10, 2, 0);
        let r = mse_db(&truth, &truth).unwrap();
        assert_eq!(r.per_sequence_db, vec![DB_FLOOR; 3]);
        assert_eq!(r.std_db, 0.0);
    }

    #[test]
    fn unit_noise_is_zero_db() {
        let truth = seqs(10, 3000, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let est: Vec<Vec<Vector>> = truth
            .iter()
            .map(|s| s.iter().map(|x| x + standard_normal(3, &mut rng)).collect())
            .collect();
        let r = mse_db(&est, &truth).unwrap();
        assert!(r.mean_db.abs() < 0.1, "{}", r.mean_db);
    }

    #[test]
    fn shape_errors() {
        let a = seqs(2, 5, 2, 3);
        assert!(matches!(mse_db(&a[..1], &a), Err(Error::ShapeMismatch(_))));
        let mut b = a.clone();
        b[1].pop();
        assert!(matches!(mse_db(&b, &a), Err(Error::ShapeMismatch(_))));
        assert!(matches!(mse_db(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn invariant_to_sequence_order_and_coordinate_permutation(seed in 0u64..1000, rot in 0usize..3) {
            let truth = seqs(4, 20, 3, seed);
            let est = seqs(4, 20, 3, seed + 7);
            let base = mse_db(&est, &truth).unwrap();
            let perm = |s: &Vec<Vec<Vector>>| -> Vec<Vec<Vector>> {
                s.iter()
                    .rev()
                    .map(|q| q.iter().map(|x| Vector::from_fn(3, |i, _| x[(i + rot) % 3])).collect())
                    .collect()
            };
            let other = mse_db(&perm(&est), &perm(&truth)).unwrap();
            let mut a = base.per_sequence_db.clone();
            let mut b = other.per_sequence_db.clone();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((base.mean_db - other.mean_db).abs() < 1e-12);
        }
    }
}
