use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use kfbench_core::bench::{
    evaluate_method, generate_split, report_render, run_suite, score, seed_override, train_method, BenchmarkSpec,
    ExperimentConfig, LinearBenchmark, LorenzBenchmark, MethodSpec, MetricReport, ReportFormat, SuiteConfig,
};
use kfbench_core::nn::Checkpoint;
use kfbench_core::ssm::lorenz::LorenzConfig;
use kfbench_core::ssm::Dataset;
use kfbench_core::{Error, Result};

#[derive(Parser)]
#[command(name = "kfbench", version, about = "Kalman-family and hybrid state-estimation benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of labeled sequences.
    Simulate(SimulateArgs),
    /// Train a learned method and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a method on labeled sequences and write a metric report.
    Eval(EvalArgs),
    /// Render metric reports as a table.
    Report(ReportArgs),
    /// Run a whole suite of methods on shared data.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Lorenz,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(clap::Args)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value = "lorenz")]
    model: ModelKind,
    #[arg(long, default_value_t = 1e-5)]
    dt_fine: f64,
    #[arg(long, default_value_t = 2000)]
    decimation: usize,
    #[arg(long, default_value_t = 3000)]
    seq_len: usize,
    #[arg(long, default_value_t = 10)]
    num_seq: usize,
    /// Observation noise variance.
    #[arg(long, default_value_t = 1.0)]
    r2: f64,
    /// Process noise variance.
    #[arg(long, default_value_t = 0.0)]
    q2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random stream to draw from; matches the splits of `run`.
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainMethod {
    Knet,
    Danse,
    Apbm,
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    method: TrainMethod,
    #[arg(long)]
    data: PathBuf,
    /// Validation sequences; without it a tenth of the data is held out.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalMethod {
    Noise,
    Kf,
    Ekf,
    Pf,
    Knet,
    Danse,
    Apbm,
    ApbmOnline,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    method: EvalMethod,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Experiment configuration (JSON); defaults to the Lorenz benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(clap::Args)]
struct ReportArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value = "markdown")]
    format: String,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Suite configuration (JSON); defaults to the full Lorenz comparison.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    report_dir: Option<PathBuf>,
    #[arg(long, default_value = "markdown")]
    format: String,
}

fn train_id(m: TrainMethod) -> &'static str {
    match m {
        TrainMethod::Knet => "knet",
        TrainMethod::Danse => "danse",
        TrainMethod::Apbm => "apbm-offline",
    }
}

fn eval_id(m: EvalMethod) -> &'static str {
    match m {
        EvalMethod::Noise => "noise",
        EvalMethod::Kf => "kf",
        EvalMethod::Ekf => "ekf",
        EvalMethod::Pf => "pf",
        EvalMethod::Knet => "knet",
        EvalMethod::Danse => "danse",
        EvalMethod::Apbm => "apbm-offline",
        EvalMethod::ApbmOnline => "apbm-online",
    }
}

/// Reads an experiment configuration whose `method` may be omitted, in
/// which case the benchmark default for `id` is used. A method given in
/// the file must agree with `id`.
fn load_config(path: Option<&Path>, id: &str) -> Result<ExperimentConfig> {
    let mut value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<serde_json::Value>(&text).map_err(|e| Error::Schema {
                path: p.to_path_buf(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => serde_json::json!({}),
    };
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
    if !obj.contains_key("method") {
        obj.insert("method".into(), serde_json::to_value(MethodSpec::benchmark_default(id)?)?);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    if cfg.method.id() != id {
        return Err(Error::Config(format!(
            "configuration describes {} but {id} was requested",
            cfg.method.id()
        )));
    }
    cfg.seed = seed_override(cfg.seed)?;
    Ok(cfg)
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let seed = seed_override(args.seed)?;
    let bench = match args.model {
        ModelKind::Lorenz => BenchmarkSpec::Lorenz(LorenzBenchmark {
            generator: LorenzConfig {
                dt_fine: args.dt_fine,
                decimation: args.decimation,
                seq_len: args.seq_len,
                r2: args.r2,
                q2: args.q2,
                ..LorenzConfig::default()
            },
            ..LorenzBenchmark::default()
        }),
        ModelKind::Linear => BenchmarkSpec::Linear(LinearBenchmark {
            q: vec![vec![args.q2]],
            r: vec![vec![args.r2]],
            seq_len: args.seq_len,
            ..LinearBenchmark::default()
        }),
    };
    let split = match args.split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    let data = generate_split(&bench, args.num_seq, seed, split)?;
    data.save(&args.out)?;
    eprintln!("wrote {} sequences to {}", data.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = load_config(Some(&args.config), train_id(args.method))?;
    cfg.validate()?;
    let mut data = Dataset::load(&args.data)?;
    let val = match &args.val {
        Some(p) => Dataset::load(p)?,
        None => {
            let hold = data.len() / 10;
            let rest = data.trajectories.split_off(data.len() - hold);
            Dataset::new(rest)
        }
    };
    let started = Instant::now();
    let ckpt = train_method(&cfg, &data, Some(&val))?;
    ckpt.save(&args.out)?;
    eprintln!(
        "trained {} on {} sequences in {:.1}s, checkpoint {}",
        cfg.method.id(),
        data.len(),
        started.elapsed().as_secs_f64(),
        args.out.display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref(), eval_id(args.method))?;
    let ckpt = args.ckpt.as_ref().map(Checkpoint::load).transpose()?;
    let test = Dataset::load(&args.data)?;
    let started = Instant::now();
    let estimates = evaluate_method(&cfg, ckpt.as_ref(), &test)?;
    let mut report = score(&cfg, &estimates, &test)?;
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    report.save(&args.report)?;
    println!("{} {:.3} dB ± {:.3}", report.method, report.mean_db, report.std_db);
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let format: ReportFormat = args.format.parse()?;
    let reports = args
        .inputs
        .iter()
        .map(MetricReport::load)
        .collect::<Result<Vec<_>>>()?;
    print!("{}", report_render(&reports, format)?);
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let format: ReportFormat = args.format.parse()?;
    let mut suite = match &args.config {
        Some(p) => SuiteConfig::load(p)?,
        None => SuiteConfig::default(),
    };
    suite.seed = seed_override(suite.seed)?;
    if args.report_dir.is_some() {
        suite.report_dir = args.report_dir;
    }
    let reports = run_suite(&suite, |r| {
        eprintln!("{:>13} {:8.3} dB  ({:.1}s)", r.method, r.mean_db, r.wall_clock_secs)
    })?;
    print!("{}", report_render(&reports, format)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
