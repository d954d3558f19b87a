use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::HarnessError;
use crate::env::{run_episode, Attempt, EnvInstance, Environment, Split};
use crate::policy::{Conditioning, Policy, SamplingParams};
use crate::trainer::{episode_seed, TrainError, STREAM_EVAL};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub instance_id: String,
    pub sample: usize,
    pub reward: f64,
    pub steps: usize,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mean_reward: f64,
    pub outcomes: Vec<EvalOutcome>,
    /// Episodes lost to transport failures.
    pub discarded: usize,
}

/// Deploy-form rollouts: the task input alone, no reflection and no memory.
/// Takes the policy by shared reference, so parameters cannot change.
pub fn deploy_rollouts(
    policy: &dyn Policy,
    env: &dyn Environment,
    instances: &[EnvInstance],
    samples_per_prompt: usize,
    sampling: &SamplingParams,
    seed: u64,
) -> Result<EvalReport, HarnessError> {
    let plain = Conditioning::plain();
    let per_instance: Vec<Result<(Vec<EvalOutcome>, usize), HarnessError>> = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut outcomes = Vec::with_capacity(samples_per_prompt);
            let mut discarded = 0;
            for s in 0..samples_per_prompt {
                let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(seed, 0, i, STREAM_EVAL, s));
                match run_episode(env, inst, policy, &plain, sampling, env.budget(), Attempt::First, &mut rng) {
                    Ok(t) => outcomes.push(EvalOutcome {
                        instance_id: inst.id.clone(),
                        sample: s,
                        reward: t.final_reward,
                        steps: t.steps.len(),
                        truncated: t.truncated,
                    }),
                    Err(e) if e.is_retryable() => discarded += 1,
                    Err(e) => return Err(TrainError::from(e).into()),
                }
            }
            Ok((outcomes, discarded))
        })
        .collect();
    let mut outcomes = Vec::new();
    let mut discarded = 0;
    for r in per_instance {
        let (o, d) = r?;
        outcomes.extend(o);
        discarded += d;
    }
    let mean_reward =
        if outcomes.is_empty() { 0.0 } else { outcomes.iter().map(|o| o.reward).sum::<f64>() / outcomes.len() as f64 };
    Ok(EvalReport { mean_reward, outcomes, discarded })
}

/// [`deploy_rollouts`] restricted to eval-split instances.
pub fn evaluate(
    policy: &dyn Policy,
    env: &dyn Environment,
    instances: &[EnvInstance],
    samples_per_prompt: usize,
    sampling: &SamplingParams,
    seed: u64,
) -> Result<EvalReport, HarnessError> {
    if let Some(bad) = instances.iter().find(|i| i.split != Split::Eval) {
        return Err(HarnessError::SplitMismatch { id: bad.id.clone(), expected: Split::Eval, found: bad.split });
    }
    if samples_per_prompt == 0 {
        return Err(HarnessError::Invalid("samples_per_prompt must be at least 1".into()));
    }
    deploy_rollouts(policy, env, instances, samples_per_prompt, sampling, seed)
}
