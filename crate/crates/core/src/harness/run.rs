use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalReport};
use super::metrics::{MetricsRow, Phase};
use super::{EnvKind, HarnessError};
use crate::env::{EnvInstance, Environment, Split};
use crate::policy::{RemoteConfig, TabularPolicy};
use crate::trainer::{
    episode_seed, erl_iteration, rlvr_iteration, Algo, Checkpoint, IterationReport, Learner, MemoryState,
    TrainerConfig, CHECKPOINT_VERSION, STREAM_BATCH,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Tabular,
    Remote,
}

/// Everything a training run needs, as read from the TOML config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvKind,
    #[serde(default = "default_algo")]
    pub algo: Algo,
    #[serde(default)]
    pub backend: BackendKind,
    #[serde(default)]
    pub seed: u64,
    pub iterations: usize,
    pub train_data: PathBuf,
    pub eval_data: PathBuf,
    pub output_dir: PathBuf,
    /// Retrieval corpus for QA; the bundled corpus when absent.
    #[serde(default)]
    pub qa_corpus: Option<PathBuf>,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub remote: RemoteConfig,
}

fn default_algo() -> Algo {
    Algo::Erl
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Invalid(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut config.train_data, &mut config.eval_data, &mut config.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(p) = config.qa_corpus.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
        Ok(config)
    }

    /// Field-level validation, including the trainer section.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut errors: Vec<String> = Vec::new();
        if self.iterations == 0 {
            errors.push("iterations: must be ≥ 1".into());
        }
        if self.env == EnvKind::Qa && self.backend == BackendKind::Tabular {
            errors.push("backend: the tabular backend needs a finite action space; use remote for qa".into());
        }
        if self.algo == Algo::Rlvr && self.trainer.ablation.is_some() {
            errors.push("trainer.ablation: ablations modify the erl loop and do not apply to rlvr".into());
        }
        if self.backend == BackendKind::Remote && self.remote.endpoint.is_empty() {
            errors.push("remote.endpoint: required for the remote backend".into());
        }
        if let Err(fields) = self.trainer.validate() {
            errors.extend(fields.iter().map(|f| format!("trainer.{f}")));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(errors))
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.csv")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.json")
    }
}

/// A training run in memory: learner, memory and the iteration counter.
pub struct TrainingRun<'e> {
    env: &'e dyn Environment,
    config: TrainerConfig,
    algo: Algo,
    seed: u64,
    learner: Learner,
    memory: MemoryState,
    iteration: usize,
    started: Instant,
}

impl<'e> TrainingRun<'e> {
    pub fn new(env: &'e dyn Environment, config: TrainerConfig, algo: Algo, seed: u64, learner: Learner) -> Self {
        TrainingRun { env, config, algo, seed, learner, memory: MemoryState::default(), iteration: 0, started: Instant::now() }
    }

    /// Fresh tabular learner over the environment's action space.
    pub fn tabular(env: &'e dyn Environment, config: TrainerConfig, algo: Algo, seed: u64) -> Self {
        Self::new(env, config, algo, seed, Learner::tabular(TabularPolicy::new(env.action_space())))
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn memory(&self) -> &MemoryState {
        &self.memory
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn elapsed_s(&self) -> f64 {
        self.started.elapsed().as_secs_f64()
    }

    /// The instances trained on in iteration `iteration`: the whole pool when
    /// it fits in one batch, else a seeded sample in pool order.
    pub fn batch<'a>(&self, pool: &'a [EnvInstance], iteration: usize) -> Vec<&'a EnvInstance> {
        if pool.len() <= self.config.batch_size {
            return pool.iter().collect();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(self.seed, iteration, 0, STREAM_BATCH, 0));
        let mut idx = sample(&mut rng, pool.len(), self.config.batch_size).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &pool[i]).collect()
    }

    /// Runs the next iteration on a batch from `pool`.
    pub fn step(&mut self, pool: &[EnvInstance]) -> Result<IterationReport, HarnessError> {
        let iteration = self.iteration + 1;
        let batch: Vec<EnvInstance> = self.batch(pool, iteration).into_iter().cloned().collect();
        let report = match self.algo {
            Algo::Erl => {
                erl_iteration(&self.config, &mut self.learner, self.env, &batch, &mut self.memory, iteration, self.seed)?
            }
            Algo::Rlvr => rlvr_iteration(&self.config, &mut self.learner, self.env, &batch, iteration, self.seed)?,
        };
        self.iteration = iteration;
        Ok(report)
    }

    pub fn evaluate(&self, eval: &[EnvInstance]) -> Result<EvalReport, HarnessError> {
        evaluate(
            self.learner.policy(),
            self.env,
            eval,
            self.config.eval_samples,
            &self.config.eval_sampling,
            episode_seed(self.seed, self.iteration, 0, 0, 0),
        )
    }

    pub fn train_rows(&self, report: &IterationReport) -> Vec<MetricsRow> {
        let wall = self.elapsed_s();
        let row = |phase, mean_reward| MetricsRow {
            iteration: report.iteration,
            wall_clock_s: wall,
            split: Split::Train,
            phase,
            mean_reward,
            group_count: report.group_count,
            memory_changed: report.memory_changed,
        };
        let mut rows = vec![row(Phase::Attempt1, report.attempt1_reward)];
        if let Some(r2) = report.attempt2_reward {
            rows.push(row(Phase::Attempt2, r2));
        }
        rows
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (policy, reference) = match &self.learner {
            Learner::Tabular { policy, reference } => (Some(policy.snapshot()), Some(reference.snapshot())),
            Learner::RolloutOnly(_) => (None, None),
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            env: self.env.name().to_string(),
            algo: self.algo,
            iteration: self.iteration,
            memory: self.memory.clone(),
            policy,
            reference,
        }
    }

    /// `iterations` iterations with eval rows every `eval_every`, streaming
    /// rows to `sink` and checkpointing (when a path is given) after every
    /// evaluation and at the end.
    pub fn run(
        &mut self,
        train: &[EnvInstance],
        eval: &[EnvInstance],
        iterations: usize,
        checkpoint: Option<&Path>,
        sink: &mut dyn FnMut(&MetricsRow) -> Result<(), HarnessError>,
    ) -> Result<Option<EvalReport>, HarnessError> {
        if train.is_empty() {
            return Err(HarnessError::Invalid("training pool is empty".into()));
        }
        if let Some(bad) = train.iter().find(|i| i.split != Split::Train) {
            return Err(HarnessError::SplitMismatch { id: bad.id.clone(), expected: Split::Train, found: bad.split });
        }
        let mut last_eval = None;
        for _ in 0..iterations {
            let report = self.step(train)?;
            tracing::info!(
                iteration = report.iteration,
                attempt1 = report.attempt1_reward,
                attempt2 = ?report.attempt2_reward,
                memory_changed = report.memory_changed,
                "iteration done"
            );
            for row in self.train_rows(&report) {
                sink(&row)?;
            }
            if !eval.is_empty() && self.iteration % self.config.eval_every == 0 {
                let result = self.evaluate(eval)?;
                sink(&MetricsRow {
                    iteration: self.iteration,
                    wall_clock_s: self.elapsed_s(),
                    split: Split::Eval,
                    phase: Phase::Deploy,
                    mean_reward: result.mean_reward,
                    group_count: eval.len(),
                    memory_changed: false,
                })?;
                last_eval = Some(result);
                if let Some(path) = checkpoint {
                    self.checkpoint().save(path)?;
                }
            }
        }
        if let Some(path) = checkpoint {
            self.checkpoint().save(path)?;
        }
        Ok(last_eval)
    }
}
