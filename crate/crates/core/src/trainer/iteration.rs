//! One training iteration: rollouts against a frozen snapshot, then the
//! update phases applied in order to the live parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::advantage::group_advantages;
use super::config::{Ablation, Algo, Internalization, TrainerConfig};
use super::loss::{distill_loss, od_loss, policy_loss, DistillSample, LossOutput, OdSample, SequenceSample, StatePair, TokenRecord};
use super::memory::{memory_update, MemoryState};
use super::TrainError;
use crate::env::{run_episode, Attempt, EnvInstance, Environment, EpisodeTrace};
use crate::policy::{
    Completion, Conditioning, Context, Policy, ReflectionRequest, TabularPolicy, EXPLORE_SENTINEL,
};
use crate::prompts;

/// Parameters being trained, or a rollout-only handle for backends whose
/// weights are out of reach.
pub enum Learner {
    Tabular { policy: TabularPolicy, reference: TabularPolicy },
    RolloutOnly(Box<dyn Policy>),
}

impl Learner {
    /// Starts training from `policy`; the reference for the KL term is a
    /// frozen copy of the starting parameters.
    pub fn tabular(policy: TabularPolicy) -> Self {
        Learner::Tabular { reference: policy.clone(), policy }
    }

    pub fn policy(&self) -> &dyn Policy {
        match self {
            Learner::Tabular { policy, .. } => policy,
            Learner::RolloutOnly(p) => p.as_ref(),
        }
    }

    pub fn tabular_policy(&self) -> Option<&TabularPolicy> {
        match self {
            Learner::Tabular { policy, .. } => Some(policy),
            Learner::RolloutOnly(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateKind {
    Attempt1,
    Reflection,
    Attempt2,
    Distill,
}

/// One advantage group as it entered the update.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupRecord {
    pub kind: UpdateKind,
    pub instance_id: String,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Counters {
    pub episodes: usize,
    pub discarded_episodes: usize,
    pub dropped_groups: usize,
    pub reflections: usize,
    pub empty_reflections: usize,
    pub second_attempts: usize,
    pub memory_stores: usize,
    pub distill_positive: usize,
    pub masked_tokens: usize,
    /// Sequences without scoreable tokens (scripted reflections).
    pub gradient_free_sequences: usize,
    pub skipped_updates: usize,
    pub support_mismatches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub algo: Algo,
    /// Mean first-attempt reward.
    pub attempt1_reward: f64,
    /// Mean over first attempts of the reward after the retry phase (the
    /// second-attempt reward where one ran). `None` for RLVR.
    pub attempt2_reward: Option<f64>,
    pub group_count: usize,
    pub memory_changed: bool,
    /// Update phases that received a batch, in application order.
    pub phases: Vec<UpdateKind>,
    pub groups: Vec<GroupRecord>,
    pub counters: Counters,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent per-episode seed from its coordinates in the run.
pub fn episode_seed(run_seed: u64, iteration: usize, instance: usize, stream: u64, rollout: usize) -> u64 {
    [iteration as u64, instance as u64, stream, rollout as u64]
        .iter()
        .fold(splitmix64(run_seed), |acc, v| splitmix64(acc ^ splitmix64(*v)))
}

pub(crate) const STREAM_ATTEMPT1: u64 = 1;
pub(crate) const STREAM_REFLECTION: u64 = 2;
pub(crate) const STREAM_ATTEMPT2: u64 = 3;
pub(crate) const STREAM_EVAL: u64 = 4;
pub(crate) const STREAM_BATCH: u64 = 5;

struct Retry {
    first: usize,
    reflection: Completion,
    conditioning: Conditioning,
    second: EpisodeTrace,
}

#[derive(Default)]
struct InstanceRollout {
    first: Vec<EpisodeTrace>,
    retries: Vec<Retry>,
    discarded: usize,
    empty_reflections: usize,
}

struct RolloutPlan<'a> {
    config: &'a TrainerConfig,
    env: &'a dyn Environment,
    policy: &'a dyn Policy,
    seed: u64,
    iteration: usize,
}

impl RolloutPlan<'_> {
    fn episode(
        &self,
        instance: &EnvInstance,
        conditioning: &Conditioning,
        attempt: Attempt,
        seed: u64,
    ) -> Result<Option<EpisodeTrace>, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match run_episode(
            self.env,
            instance,
            self.policy,
            conditioning,
            &self.config.train_sampling,
            self.env.budget(),
            attempt,
            &mut rng,
        ) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.is_retryable() => {
                tracing::warn!(instance = %instance.id, error = %e, "episode discarded");
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn first_attempts(&self, index: usize, instance: &EnvInstance, n: usize) -> Result<InstanceRollout, TrainError> {
        let mut out = InstanceRollout::default();
        for j in 0..n {
            let seed = episode_seed(self.seed, self.iteration, index, STREAM_ATTEMPT1, j);
            match self.episode(instance, &Conditioning::plain(), Attempt::First, seed)? {
                Some(t) => out.first.push(t),
                None => out.discarded += 1,
            }
        }
        Ok(out)
    }

    fn erl(&self, index: usize, instance: &EnvInstance, memory: Option<&str>) -> Result<InstanceRollout, TrainError> {
        let mut out = self.first_attempts(index, instance, self.config.rollouts_erl_per_attempt)?;
        for (j, y1) in out.first.iter().enumerate() {
            let r1 = y1.final_reward;
            if r1 >= self.config.tau_gate {
                continue;
            }
            let (reflection, conditioning) = if self.config.ablation == Some(Ablation::NoReflection) {
                let text = prompts::retry_prompt(&y1.transcript());
                let c = Completion {
                    text: text.clone(),
                    tokens: Vec::new(),
                    logprobs: None,
                    backend: crate::policy::Backend::Scripted,
                };
                (c, Conditioning::retry(text))
            } else {
                let request = ReflectionRequest {
                    env_name: self.env.name(),
                    task: y1.task(),
                    attempt: y1,
                    feedback: y1.final_feedback(),
                    reward: r1,
                    memory,
                };
                let seed = episode_seed(self.seed, self.iteration, index, STREAM_REFLECTION, j);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut c = match self.policy.reflect(&request, &self.config.train_sampling, &mut rng) {
                    Ok(c) => c,
                    Err(e) if e.is_retryable() => {
                        tracing::warn!(instance = %instance.id, error = %e, "reflection discarded");
                        out.discarded += 1;
                        continue;
                    }
                    Err(e) => return Err(e.into()),
                };
                if c.text.trim().is_empty() {
                    out.empty_reflections += 1;
                    c.text = EXPLORE_SENTINEL.to_string();
                }
                let cond = Conditioning::reflection(c.text.clone());
                (c, cond)
            };
            let seed = episode_seed(self.seed, self.iteration, index, STREAM_ATTEMPT2, j);
            match self.episode(instance, &conditioning, Attempt::Second, seed)? {
                Some(second) => out.retries.push(Retry { first: j, reflection, conditioning, second }),
                None => out.discarded += 1,
            }
        }
        Ok(out)
    }
}

fn rollouts(
    plan: &RolloutPlan<'_>,
    instances: &[EnvInstance],
    memory: Option<&str>,
    algo: Algo,
) -> Result<Vec<InstanceRollout>, TrainError> {
    instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| match algo {
            Algo::Erl => plan.erl(i, inst, memory),
            Algo::Rlvr => plan.first_attempts(i, inst, plan.config.rollouts_rlvr),
        })
        .collect()
}

/// Token records of `trace` re-keyed under `conditioning`.
fn records(
    env: &dyn Environment,
    snapshot: &TabularPolicy,
    reference: &TabularPolicy,
    conditioning: &Conditioning,
    trace: &EpisodeTrace,
    temperature: f64,
) -> Result<Vec<TokenRecord>, TrainError> {
    let mut out = Vec::with_capacity(trace.steps.len());
    for (t, step) in trace.steps.iter().enumerate() {
        let ctx = Context::for_step(env.system_prompt(), conditioning, trace, t, env.action_space());
        for token in &step.tokens {
            let site = snapshot.site(&ctx, token)?;
            out.push(TokenRecord {
                site,
                old_logprob: snapshot.log_prob(&site, temperature),
                ref_logprob: reference.log_prob(&site, temperature),
            });
        }
    }
    Ok(out)
}

fn state_pairs(
    env: &dyn Environment,
    snapshot: &TabularPolicy,
    teacher: &Conditioning,
    trace: &EpisodeTrace,
) -> Vec<StatePair> {
    let plain = Conditioning::plain();
    (0..trace.steps.len())
        .map(|t| {
            let s = Context::for_step(env.system_prompt(), &plain, trace, t, env.action_space());
            let d = Context::for_step(env.system_prompt(), teacher, trace, t, env.action_space());
            StatePair { student: snapshot.row_for(&s), teacher: snapshot.row_for(&d) }
        })
        .collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn group(
    kind: UpdateKind,
    instance_id: &str,
    rewards: Vec<f64>,
    config: &TrainerConfig,
    counters: &mut Counters,
    groups: &mut Vec<GroupRecord>,
) -> Result<Option<Vec<f64>>, TrainError> {
    if rewards.len() < 2 {
        if !rewards.is_empty() {
            counters.dropped_groups += 1;
        }
        return Ok(None);
    }
    let advantages = group_advantages(&rewards, config.advantage_eps)?;
    groups.push(GroupRecord { kind, instance_id: instance_id.to_string(), rewards, advantages: advantages.clone() });
    Ok(Some(advantages))
}

fn apply(policy: &mut TabularPolicy, out: LossOutput, lr: f64, counters: &mut Counters) -> Result<(), TrainError> {
    counters.masked_tokens += out.masked_tokens;
    counters.support_mismatches += out.support_mismatches;
    if out.skipped {
        counters.skipped_updates += 1;
        return Ok(());
    }
    policy.descend(&out.grad, lr);
    if !policy.is_finite() {
        return Err(TrainError::NonFiniteParameters);
    }
    Ok(())
}

/// Compute-matched baseline: `rollouts_rlvr` plain attempts per instance and
/// one clipped policy-gradient step.
pub fn rlvr_iteration(
    config: &TrainerConfig,
    learner: &mut Learner,
    env: &dyn Environment,
    instances: &[EnvInstance],
    iteration: usize,
    seed: u64,
) -> Result<IterationReport, TrainError> {
    run_iteration(config, learner, env, instances, &mut MemoryState::default(), iteration, seed, Algo::Rlvr)
}

/// The gated loop: first attempts, reflection and retry for every first
/// attempt below `tau_gate`, memory store, then the update phases in order
/// attempt 1 → reflection and attempt 2 → internalization.
pub fn erl_iteration(
    config: &TrainerConfig,
    learner: &mut Learner,
    env: &dyn Environment,
    instances: &[EnvInstance],
    memory: &mut MemoryState,
    iteration: usize,
    seed: u64,
) -> Result<IterationReport, TrainError> {
    run_iteration(config, learner, env, instances, memory, iteration, seed, Algo::Erl)
}

#[allow(clippy::too_many_arguments)]
fn run_iteration(
    config: &TrainerConfig,
    learner: &mut Learner,
    env: &dyn Environment,
    instances: &[EnvInstance],
    memory: &mut MemoryState,
    iteration: usize,
    seed: u64,
    algo: Algo,
) -> Result<IterationReport, TrainError> {
    let uses_memory = algo == Algo::Erl && config.ablation.is_none();
    let snapshot = learner.tabular_policy().cloned();
    let rolled = {
        let plan = RolloutPlan { config, env, policy: learner.policy(), seed, iteration };
        let mem = if uses_memory { memory.as_context() } else { None };
        rollouts(&plan, instances, mem, algo)?
    };

    let mut counters = Counters::default();
    let mut groups = Vec::new();
    let mut phases = Vec::new();
    let mut attempt1_seqs: Vec<(usize, &EpisodeTrace, f64)> = Vec::new();
    let mut attempt2_seqs: Vec<(usize, usize, f64)> = Vec::new();
    let mut reflection_seqs: Vec<(usize, usize, f64)> = Vec::new();
    let mut group_count = 0;

    for (i, (inst, r)) in instances.iter().zip(&rolled).enumerate() {
        counters.episodes += r.first.len() + r.retries.len();
        counters.discarded_episodes += r.discarded;
        counters.empty_reflections += r.empty_reflections;
        counters.second_attempts += r.retries.len();
        if config.ablation != Some(Ablation::NoReflection) {
            counters.reflections += r.retries.len();
        }
        let r1: Vec<f64> = r.first.iter().map(|t| t.final_reward).collect();
        if let Some(adv) = group(UpdateKind::Attempt1, &inst.id, r1, config, &mut counters, &mut groups)? {
            group_count += 1;
            attempt1_seqs.extend(r.first.iter().zip(adv).map(|(t, a)| (i, t, a)));
        }
        let r2: Vec<f64> = r.retries.iter().map(|x| x.second.final_reward).collect();
        if config.ablation != Some(Ablation::NoReflection) && r2.len() >= 2 {
            if let Some(adv) = group(UpdateKind::Reflection, &inst.id, r2.clone(), config, &mut counters, &mut groups)? {
                reflection_seqs.extend(adv.into_iter().enumerate().map(|(k, a)| (i, k, a)));
            }
        }
        if let Some(adv) = group(UpdateKind::Attempt2, &inst.id, r2, config, &mut counters, &mut groups)? {
            attempt2_seqs.extend(adv.into_iter().enumerate().map(|(k, a)| (i, k, a)));
        }
    }
    counters.distill_positive = rolled.iter().flat_map(|r| &r.retries).filter(|x| x.second.final_reward > 0.0).count();

    if !attempt1_seqs.is_empty() {
        phases.push(UpdateKind::Attempt1);
    }
    if !reflection_seqs.is_empty() {
        phases.push(UpdateKind::Reflection);
    }
    if !attempt2_seqs.is_empty() {
        phases.push(UpdateKind::Attempt2);
    }
    if counters.distill_positive > 0 {
        phases.push(UpdateKind::Distill);
    }

    if let (Learner::Tabular { policy, reference }, Some(snapshot)) = (&mut *learner, snapshot.as_ref()) {
        let temp = config.train_sampling.temperature;
        let clip = config.clip_params();
        let plain = Conditioning::plain();

        let mut batch = Vec::with_capacity(attempt1_seqs.len());
        for (_, trace, advantage) in &attempt1_seqs {
            let tokens = records(env, snapshot, reference, &plain, trace, temp)?;
            batch.push(SequenceSample { tokens, advantage: *advantage });
        }
        if !batch.is_empty() {
            let out = policy_loss(policy, &batch, &clip, temp);
            apply(policy, out, config.learning_rate, &mut counters)?;
        }

        let mut batch = Vec::new();
        for (i, k, _) in &reflection_seqs {
            // Scripted reflections carry no tokens and so no gradient.
            if rolled[*i].retries[*k].reflection.tokens.is_empty() {
                counters.gradient_free_sequences += 1;
            }
        }
        for (i, k, advantage) in &attempt2_seqs {
            let retry = &rolled[*i].retries[*k];
            let tokens = records(env, snapshot, reference, &retry.conditioning, &retry.second, temp)?;
            batch.push(SequenceSample { tokens, advantage: *advantage });
        }
        if !batch.is_empty() {
            let out = policy_loss(policy, &batch, &clip, temp);
            apply(policy, out, config.learning_rate, &mut counters)?;
        }

        let retries: Vec<(&InstanceRollout, &Retry)> =
            rolled.iter().flat_map(|r| r.retries.iter().map(move |x| (r, x))).collect();
        if !retries.is_empty() {
            let out = match config.internalization {
                Internalization::Distill => {
                    let mut batch = Vec::with_capacity(retries.len());
                    for (_, retry) in &retries {
                        let reward = retry.second.final_reward;
                        let tokens = if reward > 0.0 {
                            records(env, snapshot, reference, &plain, &retry.second, temp)?
                        } else {
                            Vec::new()
                        };
                        batch.push(DistillSample { tokens, reward });
                    }
                    distill_loss(policy, &batch, config.clip_upper, temp)
                }
                Internalization::OnPolicyKl => {
                    let batch: Vec<OdSample> = retries
                        .iter()
                        .map(|(r, retry)| OdSample {
                            states: state_pairs(env, snapshot, &retry.conditioning, &r.first[retry.first]),
                            reward: retry.second.final_reward,
                        })
                        .collect();
                    od_loss(policy, &batch, temp)
                }
            };
            apply(policy, out, config.learning_rate, &mut counters)?;
        }
    }

    let mut memory_changed = false;
    if uses_memory {
        for (inst, r) in instances.iter().zip(&rolled) {
            for retry in &r.retries {
                let r2 = retry.second.final_reward;
                if r2 >= config.tau_store {
                    counters.memory_stores += 1;
                    memory_changed |= memory_update(memory, &retry.reflection.text, r2, config.tau_store, &inst.id, iteration);
                }
            }
        }
    }

    let attempt1_reward = mean(rolled.iter().flat_map(|r| r.first.iter().map(|t| t.final_reward)));
    let attempt2_reward = (algo == Algo::Erl).then(|| {
        mean(rolled.iter().flat_map(|r| {
            r.first.iter().enumerate().map(move |(j, t)| {
                r.retries.iter().find(|x| x.first == j).map_or(t.final_reward, |x| x.second.final_reward)
            })
        }))
    });

    Ok(IterationReport {
        iteration,
        algo,
        attempt1_reward,
        attempt2_reward,
        group_count,
        memory_changed,
        phases,
        groups,
        counters,
    })
}
