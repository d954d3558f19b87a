use rand::RngCore;
use thiserror::Error;

use super::{Attempt, EnvError, EnvInstance, Environment, EpisodeTrace, TraceStep};
use crate::policy::{Conditioning, Context, Policy, PolicyError, SamplingParams};

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("step budget must be at least 1")]
    ZeroBudget,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("policy backend failed: {0}")]
    Policy(#[from] PolicyError),
}

impl EpisodeError {
    /// Transport-level failures; the episode is discarded rather than scored.
    pub fn is_retryable(&self) -> bool {
        matches!(self, EpisodeError::Policy(e) if e.is_retryable())
    }
}

/// Drives one attempt to termination or until `budget` steps are used.
///
/// The history visible to the policy grows append-only: every completed step
/// contributes its observation, the raw model output and the feedback string.
#[allow(clippy::too_many_arguments)]
pub fn run_episode<P: Policy + ?Sized>(
    env: &dyn Environment,
    instance: &EnvInstance,
    policy: &P,
    conditioning: &Conditioning,
    sampling: &SamplingParams,
    budget: usize,
    attempt: Attempt,
    rng: &mut dyn RngCore,
) -> Result<EpisodeTrace, EpisodeError> {
    if budget == 0 {
        return Err(EpisodeError::ZeroBudget);
    }
    let mut episode = env.start(instance)?;
    let mut steps: Vec<TraceStep> = Vec::new();
    let mut final_reward = 0.0;
    let mut terminal = false;
    let mut last_feedback = "";
    let tools = env.tools();

    while steps.len() < budget && !terminal {
        let observation = episode.observation();
        let ctx = Context {
            system: env.system_prompt(),
            conditioning,
            history: &steps,
            observation: &observation,
            action_space: env.action_space(),
            tools: tools.as_ref(),
        };
        let completion = policy.generate(&ctx, sampling, rng)?;
        let (action, outcome) = episode.step(&completion.text);
        final_reward = outcome.reward;
        terminal = outcome.terminal;
        last_feedback = outcome.feedback;
        steps.push(TraceStep {
            observation,
            output: completion.text,
            action,
            feedback: outcome.feedback.to_string(),
            tokens: completion.tokens,
            logprobs: completion.logprobs,
        });
    }

    let truncated = last_feedback == super::MAX_STEPS_FEEDBACK || !terminal;
    Ok(EpisodeTrace {
        instance_id: instance.id.clone(),
        steps,
        final_reward,
        truncated,
        attempt,
    })
}
