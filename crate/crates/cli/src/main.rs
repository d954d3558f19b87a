//! `erl`: dataset generation, training, evaluation and reward-curve plots.

mod plot;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;

use erl_core::env::{read_jsonl, EnvInstance};
use erl_core::harness::{
    evaluate, gen_dataset, BackendKind, DatasetSpec, EnvKind, MetricsWriter, RunConfig, TrainingRun,
    DEFAULT_EVAL_COUNT, DEFAULT_TRAIN_COUNT,
};
use erl_core::policy::{RemoteClient, RemoteConfig, TabularPolicy};
use erl_core::trainer::{Ablation, Algo, Checkpoint, Learner, TrainerConfig};
use erl_core::Policy;

#[derive(Parser)]
#[command(name = "erl", version, about = "Train and evaluate reflection-augmented agents on text environments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write disjoint train/eval instance files.
    GenDataset(GenArgs),
    /// Run ERL or RLVR from a TOML config.
    Train(TrainArgs),
    /// Deploy-form evaluation of a checkpoint on an eval split.
    Eval(EvalArgs),
    /// Smoothed reward curves from one or more metrics.csv files.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Frozenlake,
    Sokoban,
    Qa,
}

impl From<EnvArg> for EnvKind {
    fn from(e: EnvArg) -> Self {
        match e {
            EnvArg::Frozenlake => EnvKind::FrozenLake,
            EnvArg::Sokoban => EnvKind::Sokoban,
            EnvArg::Qa => EnvKind::Qa,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Erl,
    Rlvr,
}

#[derive(Clone, Copy, ValueEnum)]
enum AblateArg {
    NoMemory,
    NoReflection,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Tabular,
    Remote,
}

impl From<BackendArg> for BackendKind {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Tabular => BackendKind::Tabular,
            BackendArg::Remote => BackendKind::Remote,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum)]
    env: EnvArg,
    #[arg(long, default_value_t = DEFAULT_TRAIN_COUNT)]
    train_count: usize,
    #[arg(long, default_value_t = DEFAULT_EVAL_COUNT)]
    eval_count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smallest FrozenLake side.
    #[arg(long, default_value_t = 2)]
    lake_min: usize,
    /// Largest FrozenLake side.
    #[arg(long, default_value_t = 9)]
    lake_max: usize,
    /// QA question file (JSONL); the bundled questions otherwise.
    #[arg(long)]
    qa_source: Option<PathBuf>,
    #[arg(long, short)]
    out: PathBuf,
}

/// Remote endpoint settings shared by `train` and `eval`.
#[derive(Args)]
struct RemoteArgs {
    #[arg(long, env = "ERL_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, env = "ERL_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
}

impl RemoteArgs {
    fn apply(&self, remote: &mut RemoteConfig) {
        if let Some(e) = &self.endpoint {
            remote.endpoint = e.clone();
        }
        if self.api_key.is_some() {
            remote.api_key = self.api_key.clone();
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    #[arg(long, value_enum)]
    ablate: Option<AblateArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Args)]
struct EvalArgs {
    /// Tabular checkpoint; not needed for the remote backend.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Eval-split instance file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    env: Option<EnvArg>,
    #[arg(long, value_enum, default_value = "tabular")]
    backend: BackendArg,
    #[arg(long, default_value_t = 4)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// QA retrieval corpus (JSONL); the bundled corpus otherwise.
    #[arg(long)]
    qa_corpus: Option<PathBuf>,
    /// Report path (JSON).
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    remote: RemoteArgs,
}

#[derive(Args)]
struct PlotArgs {
    /// metrics.csv files; each becomes one labelled set of curves.
    #[arg(long = "metrics", required = true)]
    metrics: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, short)]
    out: PathBuf,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::GenDataset(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Plot(a) => plot::plot(&a.metrics, a.window, &a.out),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    if a.lake_min > a.lake_max {
        bail!("--lake-min {} exceeds --lake-max {}", a.lake_min, a.lake_max);
    }
    let spec = DatasetSpec {
        train_count: a.train_count,
        eval_count: a.eval_count,
        lake_sizes: a.lake_min..=a.lake_max,
        qa_source: a.qa_source,
        ..DatasetSpec::new(a.env.into(), a.seed)
    };
    let files = gen_dataset(&spec, &a.out)?;
    println!("{}\n{}", files.train.display(), files.eval.display());
    Ok(())
}

fn load_instances(path: &Path) -> Result<Vec<EnvInstance>> {
    read_jsonl(path).with_context(|| format!("reading instances from {}", path.display()))
}

fn remote_policy(remote: &RemoteConfig) -> Result<Box<dyn Policy>> {
    Ok(Box::new(RemoteClient::new(remote.clone()).context("building the remote client")?))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    if let Some(e) = a.env {
        config.env = e.into();
    }
    if let Some(al) = a.algo {
        config.algo = match al {
            AlgoArg::Erl => Algo::Erl,
            AlgoArg::Rlvr => Algo::Rlvr,
        };
    }
    if let Some(ab) = a.ablate {
        config.trainer.ablation = Some(match ab {
            AblateArg::NoMemory => Ablation::NoMemory,
            AblateArg::NoReflection => Ablation::NoReflection,
        });
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(b) = a.backend {
        config.backend = b.into();
    }
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    if let Some(o) = a.out {
        config.output_dir = o;
    }
    a.remote.apply(&mut config.remote);
    config.validate()?;

    let train = load_instances(&config.train_data)?;
    let eval = load_instances(&config.eval_data)?;
    let env = config.env.build(config.qa_corpus.as_deref())?;
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let resolved = toml::to_string_pretty(&config).context("serializing the resolved config")?;
    std::fs::write(config.output_dir.join("config.toml"), resolved)?;

    let trainer: TrainerConfig = config.trainer.clone();
    let mut run = match config.backend {
        BackendKind::Tabular => TrainingRun::tabular(env.as_ref(), trainer, config.algo, config.seed),
        BackendKind::Remote => TrainingRun::new(
            env.as_ref(),
            trainer,
            config.algo,
            config.seed,
            Learner::RolloutOnly(remote_policy(&config.remote)?),
        ),
    };
    let mut writer = MetricsWriter::create(&config.metrics_path())?;
    let checkpoint = config.checkpoint_path();
    let last = run.run(&train, &eval, config.iterations, Some(&checkpoint), &mut |row| writer.write(row))?;
    println!("metrics: {}", config.metrics_path().display());
    println!("checkpoint: {}", checkpoint.display());
    if let Some(report) = last {
        println!("final eval mean reward: {:.4}", report.mean_reward);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let instances = load_instances(&a.data)?;
    let (policy, env_kind): (Box<dyn Policy>, Option<EnvKind>) = match (BackendKind::from(a.backend), &a.checkpoint) {
        (BackendKind::Tabular, None) => bail!("--checkpoint is required for the tabular backend"),
        (BackendKind::Tabular, Some(path)) => {
            let ck = Checkpoint::load(path)?;
            let snap = ck.policy.with_context(|| format!("{} holds no tabular parameters", path.display()))?;
            let policy = TabularPolicy::from_snapshot(&snap).map_err(anyhow::Error::msg)?;
            (Box::new(policy), Some(ck.env.parse::<EnvKind>().map_err(anyhow::Error::msg)?))
        }
        (BackendKind::Remote, _) => {
            let mut remote = RemoteConfig::default();
            a.remote.apply(&mut remote);
            (remote_policy(&remote)?, None)
        }
    };
    let kind = match (a.env.map(EnvKind::from), env_kind) {
        (Some(flag), Some(ck)) if flag != ck => bail!("--env {flag} disagrees with the checkpoint's {ck}"),
        (Some(k), _) | (None, Some(k)) => k,
        (None, None) => bail!("--env is required without a checkpoint"),
    };
    let env = kind.build(a.qa_corpus.as_deref())?;
    let sampling = TrainerConfig::default().eval_sampling;
    let report = evaluate(policy.as_ref(), env.as_ref(), &instances, a.samples, &sampling, a.seed)?;
    let out = a.out.unwrap_or_else(|| {
        a.checkpoint.as_deref().and_then(Path::parent).unwrap_or(Path::new(".")).join("eval_report.json")
    });
    std::fs::write(&out, serde_json::to_vec_pretty(&report)?).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "mean reward {:.4} over {} episodes ({} instances × {} samples, {} discarded)",
        report.mean_reward,
        report.outcomes.len(),
        instances.len(),
        a.samples,
        report.discarded
    );
    println!("report: {}", out.display());
    Ok(())
}
