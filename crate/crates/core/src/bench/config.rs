use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::apbm::{ApbmConfig, ApbmTrainConfig};
use crate::danse::DanseConfig;
use crate::error::{Error, Result};
use crate::gaussmath::{Gaussian, Matrix, Vector};
use crate::knet::KnetConfig;
use crate::nn::TrainConfig;
use crate::ssm::lorenz::{lorenz_filter_model, LorenzConfig};
use crate::ssm::{LinearModel, NonlinearModel};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "KFBENCH_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LorenzBenchmark {
    pub generator: LorenzConfig,
    /// Order of the Taylor expansion used by the filters' transition.
    pub taylor_order: usize,
    /// Process noise variance assumed by the model-based filters.
    pub filter_q: f64,
}

impl Default for LorenzBenchmark {
    fn default() -> Self {
        Self {
            generator: LorenzConfig::default(),
            taylor_order: 5,
            filter_q: 0.1,
        }
    }
}

/// Linear-Gaussian system given by row-major matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearBenchmark {
    pub f: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub init_mean: Vec<f64>,
    pub init_cov: Vec<Vec<f64>>,
    pub seq_len: usize,
}

impl Default for LinearBenchmark {
    fn default() -> Self {
        Self {
            f: vec![vec![0.9]],
            h: vec![vec![1.0]],
            q: vec![vec![1.0]],
            r: vec![vec![1.0]],
            init_mean: vec![0.0],
            init_cov: vec![vec![1.0]],
            seq_len: 100,
        }
    }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> Result<Matrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!("matrix {name:?} must be a non-empty rectangular array")));
    }
    Ok(Matrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

impl LinearBenchmark {
    pub fn model(&self) -> Result<LinearModel> {
        let init = Gaussian::new(Vector::from_vec(self.init_mean.clone()), matrix("init_cov", &self.init_cov)?)
            .map_err(|e| Error::Config(format!("initial belief: {e}")))?;
        LinearModel::new(
            matrix("f", &self.f)?,
            matrix("h", &self.h)?,
            matrix("q", &self.q)?,
            matrix("r", &self.r)?,
            init,
        )
        .map_err(|e| Error::Config(format!("linear benchmark: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum BenchmarkSpec {
    Lorenz(LorenzBenchmark),
    Linear(LinearBenchmark),
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self::Lorenz(LorenzBenchmark::default())
    }
}

impl BenchmarkSpec {
    /// The model handed to the model-based and hybrid estimators.
    pub fn filter_model(&self) -> Result<NonlinearModel> {
        match self {
            Self::Lorenz(b) => {
                let g = &b.generator;
                lorenz_filter_model(g.dt(), b.taylor_order, b.filter_q, g.r2, g.init_belief())
                    .map_err(|e| Error::Config(format!("lorenz filter model: {e}")))
            }
            Self::Linear(b) => Ok(NonlinearModel::from_linear(&b.model()?)),
        }
    }

    pub fn linear_model(&self) -> Option<Result<LinearModel>> {
        match self {
            Self::Lorenz(_) => None,
            Self::Linear(b) => Some(b.model()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self {
            train: 80,
            val: 10,
            test: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApbmSpec {
    /// Joint state/parameter filtering on the test sequences instead of a
    /// fixed-parameter EKF after offline training.
    pub online: bool,
    pub model: ApbmConfig,
    pub train: ApbmTrainConfig,
}

impl Default for ApbmSpec {
    fn default() -> Self {
        Self {
            online: false,
            model: ApbmConfig::default(),
            train: ApbmTrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodSpec {
    /// Observations taken as the state estimate.
    Noise,
    Kf,
    Ekf,
    Pf { particles: usize },
    Knet(KnetConfig),
    Danse(DanseConfig),
    Apbm(ApbmSpec),
}

impl MethodSpec {
    /// Name used in reports.
    pub fn id(&self) -> &'static str {
        match self {
            Self::Noise => "noise",
            Self::Kf => "kf",
            Self::Ekf => "ekf",
            Self::Pf { .. } => "pf",
            Self::Knet(_) => "knet",
            Self::Danse(_) => "danse",
            Self::Apbm(s) if s.online => "apbm-online",
            Self::Apbm(_) => "apbm-offline",
        }
    }

    pub fn needs_training(&self) -> bool {
        match self {
            Self::Knet(_) | Self::Danse(_) => true,
            Self::Apbm(s) => !s.online,
            _ => false,
        }
    }

    /// Desk-scale settings for the Lorenz comparison.
    pub fn benchmark_default(id: &str) -> Result<Self> {
        let capped = |epochs: usize, lr: f64, lr_decay: f64, cap: f64| TrainConfig {
            epochs,
            lr,
            lr_decay,
            batch_size: 8,
            time_cap_secs: Some(cap),
            ..TrainConfig::default()
        };
        let apbm = |online: bool| ApbmSpec {
            online,
            model: ApbmConfig {
                input_scale: 0.05,
                eta: 0.01,
                mix_var: 0.1,
                dnn_var: 0.1,
                ..ApbmConfig::default()
            },
            train: ApbmTrainConfig {
                epochs: 1,
                time_cap_secs: Some(240.0),
                ..ApbmTrainConfig::default()
            },
        };
        Ok(match id {
            "noise" => Self::Noise,
            "kf" => Self::Kf,
            "ekf" => Self::Ekf,
            "pf" => Self::Pf { particles: 1000 },
            "knet" => Self::Knet(KnetConfig {
                train: capped(100, 2e-3, 0.93, 900.0),
                ..KnetConfig::default()
            }),
            "danse" => Self::Danse(DanseConfig {
                train: capped(100, 1e-3, 1.0, 600.0),
                ..DanseConfig::default()
            }),
            "apbm" | "apbm-offline" => Self::Apbm(apbm(false)),
            "apbm-online" => Self::Apbm(apbm(true)),
            other => return Err(Error::Config(format!("unknown method {other:?}"))),
        })
    }

    /// Forces the training seed to `seed` wherever the method has one.
    pub(crate) fn with_seed(mut self, seed: u64) -> Self {
        match &mut self {
            Self::Knet(c) => c.train.seed = seed,
            Self::Danse(c) => c.train.seed = seed,
            Self::Apbm(s) => s.train.seed = seed,
            _ => {}
        }
        self
    }
}

/// Dataset files; a missing split is generated from the benchmark.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub benchmark: BenchmarkSpec,
    pub method: MethodSpec,
    #[serde(default)]
    pub splits: SplitSizes,
    #[serde(default)]
    pub data: DataPaths,
    /// Trained parameters to evaluate instead of training.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Where to store freshly trained parameters.
    #[serde(default)]
    pub save_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub report: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(benchmark: BenchmarkSpec, method: MethodSpec, seed: u64) -> Self {
        Self {
            benchmark,
            method,
            splits: SplitSizes::default(),
            data: DataPaths::default(),
            checkpoint: None,
            save_checkpoint: None,
            seed,
            report: None,
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }

    pub fn validate(&self) -> Result<()> {
        if self.splits.test == 0 && self.data.test.is_none() {
            return Err(Error::Config("no test sequences".into()));
        }
        if self.method.needs_training()
            && self.checkpoint.is_none()
            && self.splits.train == 0
            && self.data.train.is_none()
        {
            return Err(Error::Config(format!("{} needs training data", self.method.id())));
        }
        for p in [&self.data.train, &self.data.val, &self.data.test, &self.checkpoint]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("{} does not exist", p.display())));
            }
        }
        if let MethodSpec::Pf { particles: 0 } = self.method {
            return Err(Error::Config("pf needs at least one particle".into()));
        }
        if let MethodSpec::Apbm(s) = &self.method {
            s.model.validate()?;
        }
        if let MethodSpec::Knet(c) = &self.method {
            c.train.validate()?;
        }
        if let MethodSpec::Danse(c) = &self.method {
            c.train.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Several methods on one shared set of generated sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub benchmark: BenchmarkSpec,
    pub splits: SplitSizes,
    pub data: DataPaths,
    pub seed: u64,
    pub methods: Vec<MethodSpec>,
    /// Directory receiving one report per method.
    pub report_dir: Option<PathBuf>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let methods = ["noise", "ekf", "pf", "knet", "danse", "apbm-offline", "apbm-online"]
            .iter()
            .map(|id| MethodSpec::benchmark_default(id).expect("known method"))
            .collect();
        Self {
            benchmark: BenchmarkSpec::default(),
            splits: SplitSizes::default(),
            data: DataPaths::default(),
            seed: 0,
            methods,
            report_dir: None,
        }
    }
}

impl SuiteConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }

    pub fn experiment(&self, method: &MethodSpec) -> ExperimentConfig {
        ExperimentConfig {
            benchmark: self.benchmark.clone(),
            method: method.clone(),
            splits: self.splits,
            data: self.data.clone(),
            checkpoint: None,
            save_checkpoint: None,
            seed: self.seed,
            report: self
                .report_dir
                .as_ref()
                .map(|d| d.join(format!("{}.json", method.id()))),
        }
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Seed from [`SEED_ENV`] when set, otherwise `configured`.
pub fn seed_override(configured: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(configured),
    }
}
