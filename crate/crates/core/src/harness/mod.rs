//! Dataset generation, training runs, deploy-form evaluation and metrics.

mod dataset;
mod eval;
mod metrics;
mod run;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{
    dataset_paths, gen_dataset, generate_instances, lake_instance, sokoban_instance, DatasetFiles, DatasetSpec,
    DEFAULT_EVAL_COUNT, DEFAULT_TRAIN_COUNT,
};
pub use eval::{deploy_rollouts, evaluate, EvalOutcome, EvalReport};
pub use metrics::{read_metrics, smooth, MetricsRow, MetricsWriter, Phase, METRICS_HEADER};
pub use run::{BackendKind, RunConfig, TrainingRun};

use crate::env::{DatasetError, EnvError, Environment, Split};
use crate::frozenlake::FrozenLake;
use crate::qa::{self, CorpusError, QaEnv, SearchIndex};
use crate::sokoban::Sokoban;
use crate::trainer::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    FrozenLake,
    Sokoban,
    Qa,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::FrozenLake => "frozenlake",
            EnvKind::Sokoban => "sokoban",
            EnvKind::Qa => "qa",
        }
    }

    /// The environment, with the QA retriever built from `qa_corpus` or the
    /// bundled corpus.
    pub fn build(self, qa_corpus: Option<&Path>) -> Result<Box<dyn Environment>, HarnessError> {
        Ok(match self {
            EnvKind::FrozenLake => Box::new(FrozenLake),
            EnvKind::Sokoban => Box::new(Sokoban),
            EnvKind::Qa => {
                let index = match qa_corpus {
                    Some(p) => SearchIndex::from_jsonl(p)?,
                    None => qa::bundled_index(),
                };
                Box::new(QaEnv::new(Arc::new(index)))
            }
        })
    }
}

impl std::str::FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [EnvKind::FrozenLake, EnvKind::Sokoban, EnvKind::Qa]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown environment {s:?} (frozenlake, sokoban, qa)"))
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("metrics csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("instance {id} belongs to the {found} split, expected {expected}")]
    SplitMismatch { id: String, expected: Split, found: Split },
    #[error("{0}")]
    Invalid(String),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }
}
