use std::collections::HashSet;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use super::{EnvKind, HarnessError};
use crate::env::{write_jsonl, EnvError, EnvInstance, Split};
use crate::frozenlake::{self, LakeInstance};
use crate::qa::{self, QaRecord};
use crate::sokoban::{self, SokobanInstance};
use crate::trainer::episode_seed;

pub const DEFAULT_TRAIN_COUNT: usize = 10_000;
pub const DEFAULT_EVAL_COUNT: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub env: EnvKind,
    pub train_count: usize,
    pub eval_count: usize,
    pub seed: u64,
    /// FrozenLake side lengths.
    pub lake_sizes: RangeInclusive<usize>,
    /// QA question file; the bundled set when absent.
    pub qa_source: Option<PathBuf>,
}

impl DatasetSpec {
    pub fn new(env: EnvKind, seed: u64) -> Self {
        DatasetSpec {
            env,
            train_count: DEFAULT_TRAIN_COUNT,
            eval_count: DEFAULT_EVAL_COUNT,
            seed,
            lake_sizes: frozenlake::SIZE_RANGE,
            qa_source: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub train: PathBuf,
    pub eval: PathBuf,
}

pub fn lake_instance(id: String, seed: u64, split: Split, lake: &LakeInstance) -> EnvInstance {
    EnvInstance { id, seed, split, payload: serde_json::to_value(lake).expect("lake serializes") }
}

pub fn sokoban_instance(id: String, seed: u64, split: Split, inst: &SokobanInstance) -> EnvInstance {
    EnvInstance { id, seed, split, payload: serde_json::to_value(inst.to_payload()).expect("board serializes") }
}

/// Layout identity used for train/eval disjointness.
fn layout_key(instance: &EnvInstance) -> String {
    match instance.payload.as_object() {
        Some(obj) => {
            let mut o = obj.clone();
            o.remove("frozen_prob");
            o.remove("min_solution");
            serde_json::Value::Object(o).to_string()
        }
        None => instance.payload.to_string(),
    }
}

fn grid_instances(spec: &DatasetSpec) -> Result<(Vec<EnvInstance>, Vec<EnvInstance>), HarnessError> {
    let name = spec.env.name();
    let total = spec.train_count + spec.eval_count;
    let max_candidates = total.saturating_mul(100).max(10_000);
    let mut seen = HashSet::new();
    let (mut train, mut eval) = (Vec::with_capacity(spec.train_count), Vec::with_capacity(spec.eval_count));
    let mut k = 0usize;
    while train.len() + eval.len() < total {
        if k >= max_candidates {
            return Err(HarnessError::Env(EnvError::Generation { seed: spec.seed, attempts: k }));
        }
        let seed = episode_seed(spec.seed, 0, k, 0, 0);
        k += 1;
        let (split, index) =
            if train.len() < spec.train_count { (Split::Train, train.len()) } else { (Split::Eval, eval.len()) };
        let id = format!("{name}-{split}-{index:05}");
        let inst = match spec.env {
            EnvKind::FrozenLake => {
                let lake = frozenlake::generate_lake(seed, spec.lake_sizes.clone(), frozenlake::FROZEN_PROB_RANGE)?;
                lake_instance(id, seed, split, &lake)
            }
            EnvKind::Sokoban => sokoban_instance(id, seed, split, &sokoban::generate_sokoban(seed)?),
            EnvKind::Qa => unreachable!("QA instances are read, not generated"),
        };
        // Duplicates inside train are allowed to be skipped too, so every
        // layout appears once across both files.
        if !seen.insert(layout_key(&inst)) {
            continue;
        }
        match split {
            Split::Train => train.push(inst),
            Split::Eval => eval.push(inst),
        }
    }
    Ok((train, eval))
}

fn qa_instances(spec: &DatasetSpec) -> Result<(Vec<EnvInstance>, Vec<EnvInstance>), HarnessError> {
    let records: Vec<QaRecord> = match &spec.qa_source {
        Some(p) => qa::read_qa_records(p)?,
        None => qa::bundled_records(),
    };
    let mut ids = HashSet::new();
    let mut questions = HashSet::new();
    for r in &records {
        if !ids.insert(r.id.clone()) {
            return Err(HarnessError::Invalid(format!("duplicate QA id {}", r.id)));
        }
        if !questions.insert(qa::normalize(&r.question)) {
            return Err(HarnessError::Invalid(format!("question of {} appears twice", r.id)));
        }
    }
    let pick = |split: Split, count: usize| -> Vec<EnvInstance> {
        let chosen: Vec<EnvInstance> = records
            .iter()
            .filter(|r| r.split == split)
            .take(count)
            .enumerate()
            .map(|(i, r)| r.clone().into_instance(episode_seed(spec.seed, 0, i, split as u64 + 1, 0)))
            .collect();
        if chosen.len() < count {
            tracing::warn!(%split, requested = count, available = chosen.len(), "QA source has fewer questions than requested");
        }
        chosen
    };
    let (train, eval) = (pick(Split::Train, spec.train_count), pick(Split::Eval, spec.eval_count));
    if train.is_empty() || eval.is_empty() {
        return Err(HarnessError::Invalid("QA source must provide at least one train and one eval question".into()));
    }
    Ok((train, eval))
}

/// Deterministic train/eval instance sets with disjoint ids and layouts.
pub fn generate_instances(spec: &DatasetSpec) -> Result<(Vec<EnvInstance>, Vec<EnvInstance>), HarnessError> {
    if spec.train_count == 0 || spec.eval_count == 0 {
        return Err(HarnessError::Invalid("train and eval counts must be at least 1".into()));
    }
    match spec.env {
        EnvKind::Qa => qa_instances(spec),
        _ => grid_instances(spec),
    }
}

pub fn dataset_paths(out_dir: &Path, env: EnvKind) -> DatasetFiles {
    DatasetFiles {
        train: out_dir.join(format!("{}_train.jsonl", env.name())),
        eval: out_dir.join(format!("{}_eval.jsonl", env.name())),
    }
}

pub fn gen_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetFiles, HarnessError> {
    let (train, eval) = generate_instances(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| HarnessError::io(out_dir, e))?;
    let files = dataset_paths(out_dir, spec.env);
    write_jsonl(&files.train, &train)?;
    write_jsonl(&files.eval, &eval)?;
    Ok(files)
}
