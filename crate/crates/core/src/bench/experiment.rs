use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{BenchmarkSpec, ExperimentConfig, MethodSpec, SplitSizes, SuiteConfig};
use super::metrics::{mse_db, MetricReport};
use crate::apbm::{
    fixed_theta_model, run_apbm_online, train_apbm_offline, ApbmModel, AugmentedBelief,
};
use crate::danse::{danse_filter, train_danse, DanseObsModel, DansePriorNet};
use crate::error::{Error, Result};
use crate::filters::{bootstrap_pf, ekf_filter, kf_filter};
use crate::gaussmath::{Matrix, Vector};
use crate::knet::{knet_filter, train_knet, KGainNet};
use crate::nn::{Checkpoint, CheckpointMeta};
use crate::ssm::lorenz::lorenz_generate;
use crate::ssm::{simulate, Dataset, StateSpaceModel};

/// Random streams of the seeded generator; distinct streams give
/// non-overlapping sequences.
const TRAIN_STREAM: u64 = 1;
const VAL_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;
const PF_STREAM: u64 = 4;
const INIT_STREAM: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Draws `count` sequences from the benchmark's generator.
pub fn generate_split(bench: &BenchmarkSpec, count: usize, seed: u64, split: &str) -> Result<Dataset> {
    let id = match split {
        "train" => TRAIN_STREAM,
        "val" => VAL_STREAM,
        "test" => TEST_STREAM,
        other => return Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
    };
    let mut rng = stream(seed, id);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut t = match bench {
            BenchmarkSpec::Lorenz(b) => lorenz_generate(&b.generator, &mut rng)?,
            BenchmarkSpec::Linear(b) => simulate(&b.model()?, b.seq_len, &mut rng)?,
        };
        t.id = format!("{split}-{i}");
        out.push(t);
    }
    Ok(Dataset::new(out))
}

/// Train, validation and test sequences.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// Loads the configured files and generates the rest. Training and
    /// validation data are produced only when `with_training` is set.
    pub fn prepare(
        bench: &BenchmarkSpec,
        sizes: SplitSizes,
        data: &super::config::DataPaths,
        seed: u64,
        with_training: bool,
    ) -> Result<Self> {
        let get = |path: &Option<std::path::PathBuf>, count: usize, name: &str, wanted: bool| -> Result<Dataset> {
            match path {
                Some(p) => Dataset::load(p),
                None if wanted => generate_split(bench, count, seed, name),
                None => Ok(Dataset::default()),
            }
        };
        Ok(Self {
            train: get(&data.train, sizes.train, "train", with_training)?,
            val: get(&data.val, sizes.val, "val", with_training)?,
            test: get(&data.test, sizes.test, "test", true)?,
        })
    }
}

fn meta(cfg: &ExperimentConfig) -> CheckpointMeta {
    CheckpointMeta {
        seed: cfg.seed,
        epochs: match &cfg.method {
            MethodSpec::Knet(c) => c.train.epochs,
            MethodSpec::Danse(c) => c.train.epochs,
            MethodSpec::Apbm(s) => s.train.epochs,
            _ => 0,
        },
        config_hash: cfg.hash(),
    }
}

/// Observation model for DANSE: the filter model's observation Jacobian,
/// exact when the observation map is linear.
fn danse_obs(cfg: &ExperimentConfig) -> Result<DanseObsModel> {
    let model = cfg.benchmark.filter_model()?;
    DanseObsModel::new(
        model.observation_jacobian(&model.init().mean),
        model.obs_cov().clone(),
    )
}

fn apbm_model(cfg: &ExperimentConfig, spec: &crate::bench::ApbmSpec) -> Result<ApbmModel> {
    ApbmModel::new(cfg.benchmark.filter_model()?, &spec.model, &mut stream(cfg.seed, INIT_STREAM))
}

/// Trains the configured method and returns its checkpoint.
pub fn train_method(cfg: &ExperimentConfig, train: &Dataset, val: Option<&Dataset>) -> Result<Checkpoint> {
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    let val = val.filter(|v| !v.is_empty());
    let method = cfg.method.clone().with_seed(cfg.seed);
    match &method {
        MethodSpec::Knet(c) => {
            let model = cfg.benchmark.filter_model()?;
            let trained = train_knet(&model, train, val, c)?;
            Ok(trained.net.to_checkpoint(meta(cfg)))
        }
        MethodSpec::Danse(c) => {
            let obs = danse_obs(cfg)?;
            let trained = train_danse(&obs, &train.unlabeled(), val.map(Dataset::unlabeled).as_ref(), c)?;
            Ok(trained.net.to_checkpoint(&obs, meta(cfg)))
        }
        MethodSpec::Apbm(s) => {
            let model = apbm_model(cfg, s)?;
            let fit = train_apbm_offline(&train.unlabeled(), &model, &s.train)?;
            model.to_checkpoint(&fit.theta, &fit.theta_cov_diag(), meta(cfg))
        }
        other => Err(Error::Config(format!("{} has nothing to train", other.id()))),
    }
}

/// State estimates of the configured method on each test sequence.
pub fn evaluate_method(cfg: &ExperimentConfig, ckpt: Option<&Checkpoint>, test: &Dataset) -> Result<Vec<Vec<Vector>>> {
    let need_ckpt = || {
        ckpt.ok_or_else(|| Error::Config(format!("{} needs a checkpoint to evaluate", cfg.method.id())))
    };
    let mut out = Vec::with_capacity(test.len());
    match &cfg.method {
        MethodSpec::Noise => {
            for t in test.iter() {
                out.push(t.obs.clone());
            }
        }
        MethodSpec::Kf => {
            let lin = cfg
                .benchmark
                .linear_model()
                .ok_or_else(|| Error::Config("kf needs a linear benchmark".into()))??;
            for t in test.iter() {
                out.push(kf_filter(&lin, &t.obs)?.means);
            }
        }
        MethodSpec::Ekf => {
            let model = cfg.benchmark.filter_model()?;
            for t in test.iter() {
                out.push(ekf_filter(&model, &t.obs)?.means);
            }
        }
        MethodSpec::Pf { particles } => {
            let model = cfg.benchmark.filter_model()?;
            let mut rng = stream(cfg.seed, PF_STREAM);
            for t in test.iter() {
                out.push(bootstrap_pf(&model, &t.obs, *particles, &mut rng)?.means);
            }
        }
        MethodSpec::Knet(_) => {
            let model = cfg.benchmark.filter_model()?;
            let net = KGainNet::from_checkpoint(need_ckpt()?)?;
            for t in test.iter() {
                out.push(knet_filter(&model, &net, &t.obs)?.means);
            }
        }
        MethodSpec::Danse(_) => {
            let (net, obs) = DansePriorNet::from_checkpoint(need_ckpt()?)?;
            for t in test.iter() {
                out.push(danse_filter(&net, &obs, &t.obs)?.means);
            }
        }
        MethodSpec::Apbm(s) if s.online => {
            let (model, init) = match ckpt {
                Some(c) => {
                    let (model, theta, diag) = ApbmModel::from_checkpoint(c, cfg.benchmark.filter_model()?)?;
                    let cov = Matrix::from_diagonal(&Vector::from_vec(diag));
                    let init = AugmentedBelief::new(model.pbm.init(), &theta, &cov);
                    (model, init)
                }
                None => {
                    let model = apbm_model(cfg, s)?;
                    let init = model.initial_belief();
                    (model, init)
                }
            };
            for t in test.iter() {
                out.push(run_apbm_online(&model, &t.obs, &init)?.filter.means);
            }
        }
        MethodSpec::Apbm(_) => {
            let (model, theta, _) = ApbmModel::from_checkpoint(need_ckpt()?, cfg.benchmark.filter_model()?)?;
            let fixed = fixed_theta_model(&model, &theta)?;
            for t in test.iter() {
                out.push(ekf_filter(&fixed, &t.obs)?.means);
            }
        }
    }
    Ok(out)
}

/// Scores estimates against the labeled test sequences.
pub fn score(cfg: &ExperimentConfig, estimates: &[Vec<Vector>], test: &Dataset) -> Result<MetricReport> {
    let truth = test
        .iter()
        .map(|t| {
            t.states
                .clone()
                .ok_or_else(|| Error::Config(format!("test sequence {:?} has no ground-truth states", t.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = mse_db(estimates, &truth)?;
    report.method = cfg.method.id().to_string();
    report.config_hash = cfg.hash();
    Ok(report)
}

fn run_on(cfg: &ExperimentConfig, splits: &Splits) -> Result<MetricReport> {
    let started = Instant::now();
    let ckpt = match &cfg.checkpoint {
        Some(p) => Some(Checkpoint::load(p)?),
        None if cfg.method.needs_training() => {
            let c = train_method(cfg, &splits.train, Some(&splits.val))?;
            if let Some(p) = &cfg.save_checkpoint {
                c.save(p)?;
            }
            Some(c)
        }
        None => None,
    };
    let estimates = evaluate_method(cfg, ckpt.as_ref(), &splits.test)?;
    let mut report = score(cfg, &estimates, &splits.test)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    if let Some(p) = &cfg.report {
        report.save(p)?;
    }
    Ok(report)
}

/// Prepares data, trains when needed, evaluates on the test split and
/// writes the report if a path is configured. Deterministic given the
/// configuration (wall-clock time aside).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let training = cfg.method.needs_training() && cfg.checkpoint.is_none();
    let splits = Splits::prepare(&cfg.benchmark, cfg.splits, &cfg.data, cfg.seed, training)?;
    run_on(cfg, &splits)
}

/// Runs every method of the suite on one shared set of sequences.
pub fn run_suite(suite: &SuiteConfig, mut progress: impl FnMut(&MetricReport)) -> Result<Vec<MetricReport>> {
    if suite.methods.is_empty() {
        return Err(Error::EmptyInput);
    }
    let configs: Vec<ExperimentConfig> = suite.methods.iter().map(|m| suite.experiment(m)).collect();
    for c in &configs {
        c.validate()?;
    }
    if let Some(dir) = &suite.report_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let training = suite.methods.iter().any(MethodSpec::needs_training);
    let splits = Splits::prepare(&suite.benchmark, suite.splits, &suite.data, suite.seed, training)?;
    let mut reports = Vec::with_capacity(configs.len());
    for c in &configs {
        let r = run_on(c, &splits)?;
        progress(&r);
        reports.push(r);
    }
    Ok(reports)
}
