//! Decision backends behind one generation/scoring contract.
//!
//! [`TabularPolicy`] is a softmax table keyed by context digest with exact
//! gradients; [`RemoteClient`] speaks a chat-completions wire protocol and is
//! rollout-only.

mod advice;
mod remote;
mod tabular;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::{EpisodeTrace, TraceStep};

pub use advice::{
    action_mask, compose_reflection, parse_advice, scripted_reflector, Advice, EXPLORE_SENTINEL,
};
pub use remote::{
    ChatMessage, ChatRequest, ChatResponse, RemoteClient, RemoteConfig, RetryPolicy, ToolCallMessage,
};
pub use tabular::{ActionMask, Gradient, Row, TabularPolicy, TabularSnapshot, TokenSite};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("token {0:?} is not in the backend vocabulary")]
    UnknownToken(String),
    #[error("{0}")]
    Unsupported(String),
}

impl PolicyError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, PolicyError::Transport(_) | PolicyError::Http { .. } | PolicyError::Exhausted { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Tabular,
    Remote,
    Scripted,
}

/// What, beyond the task itself, the policy is conditioned on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Guidance {
    #[default]
    None,
    /// A reflection Δ produced from a failed attempt.
    Reflection(String),
    /// The generic retry prompt carrying the raw first-attempt trajectory.
    Retry(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conditioning {
    pub memory: Option<String>,
    pub guidance: Guidance,
}

impl Conditioning {
    /// Deployment form: the task input alone.
    pub fn plain() -> Self {
        Conditioning::default()
    }

    pub fn reflection(text: impl Into<String>) -> Self {
        Conditioning { memory: None, guidance: Guidance::Reflection(text.into()) }
    }

    pub fn retry(text: impl Into<String>) -> Self {
        Conditioning { memory: None, guidance: Guidance::Retry(text.into()) }
    }

    pub fn is_plain(&self) -> bool {
        self.memory.is_none() && self.guidance == Guidance::None
    }
}

/// Everything a backend sees when choosing the next output.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub system: &'a str,
    pub conditioning: &'a Conditioning,
    pub history: &'a [TraceStep],
    pub observation: &'a str,
    pub action_space: &'a [&'static str],
    pub tools: Option<&'a serde_json::Value>,
}

impl<'a> Context<'a> {
    /// Context of step `t` of a recorded trace, under `conditioning`.
    pub fn for_step(
        system: &'a str,
        conditioning: &'a Conditioning,
        trace: &'a EpisodeTrace,
        t: usize,
        action_space: &'a [&'static str],
    ) -> Self {
        Context {
            system,
            conditioning,
            history: &trace.steps[..t],
            observation: &trace.steps[t].observation,
            action_space,
            tools: None,
        }
    }

    /// Key of the same context with memory and guidance stripped.
    pub fn deploy_key(&self) -> ContextKey {
        const PLAIN: Conditioning = Conditioning { memory: None, guidance: Guidance::None };
        Context { conditioning: &PLAIN, ..*self }.key()
    }

    pub fn key(&self) -> ContextKey {
        let mut h = Sha256::new();
        let mut field = |tag: &[u8], value: &str| {
            h.update(tag);
            h.update((value.len() as u64).to_le_bytes());
            h.update(value.as_bytes());
        };
        field(b"system", self.system);
        if let Some(m) = &self.conditioning.memory {
            field(b"memory", m);
        }
        match &self.conditioning.guidance {
            Guidance::None => {}
            Guidance::Reflection(r) => field(b"reflection", r),
            Guidance::Retry(r) => field(b"retry", r),
        }
        for step in self.history {
            field(b"obs", &step.observation);
            field(b"out", &step.output);
            field(b"fb", &step.feedback);
        }
        field(b"current", self.observation);
        let digest = h.finalize();
        ContextKey(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
    }
}

/// Digest of a full conditioning context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextKey(pub u64);

impl ContextKey {
    pub fn to_hex(self) -> String {
        format!("{:016x}", self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        u64::from_str_radix(s, 16).ok().map(ContextKey)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    /// Nucleus mass; 1.0 disables truncation.
    pub top_p: f64,
    /// 0 disables top-k truncation.
    pub top_k: usize,
    pub max_tokens: usize,
}

impl SamplingParams {
    pub fn training() -> Self {
        SamplingParams { temperature: 0.7, top_p: 1.0, top_k: 0, max_tokens: 8196 }
    }

    pub fn validation() -> Self {
        SamplingParams { temperature: 0.7, top_p: 0.8, top_k: 20, max_tokens: 8196 }
    }
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self::training()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub tokens: Vec<String>,
    /// Per-token log-probabilities, when the backend exposes them.
    pub logprobs: Option<Vec<f64>>,
    pub backend: Backend,
}

/// Inputs to a reflection, in conditioning order: task, first attempt,
/// its feedback and reward, then memory.
#[derive(Debug, Clone, Copy)]
pub struct ReflectionRequest<'a> {
    pub env_name: &'a str,
    pub task: &'a str,
    pub attempt: &'a EpisodeTrace,
    pub feedback: &'a str,
    pub reward: f64,
    pub memory: Option<&'a str>,
}

impl ReflectionRequest<'_> {
    pub fn user_message(&self) -> String {
        let mut msg = String::new();
        msg.push_str("## Task\n");
        msg.push_str(self.task);
        msg.push_str("\n\n## First attempt\n");
        msg.push_str(&self.attempt.transcript());
        msg.push_str("\n## Feedback\n");
        msg.push_str(self.feedback);
        msg.push_str(&format!("\n\n## Reward\n{}\n", self.reward));
        msg.push_str("\n## Memory\n");
        msg.push_str(self.memory.filter(|m| !m.is_empty()).unwrap_or("(empty)"));
        msg.push('\n');
        msg
    }
}

pub trait Policy: Send + Sync {
    fn backend(&self) -> Backend;

    fn generate(
        &self,
        ctx: &Context<'_>,
        sampling: &SamplingParams,
        rng: &mut dyn RngCore,
    ) -> Result<Completion, PolicyError>;

    /// Produces a reflection Δ. The default is the deterministic scripted
    /// reflector merged with applicable memory.
    fn reflect(
        &self,
        request: &ReflectionRequest<'_>,
        _sampling: &SamplingParams,
        _rng: &mut dyn RngCore,
    ) -> Result<Completion, PolicyError> {
        let text = compose_reflection(request.env_name, request.task, request.attempt, request.memory);
        Ok(Completion { text, tokens: Vec::new(), logprobs: None, backend: Backend::Scripted })
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn backend(&self) -> Backend {
        (**self).backend()
    }

    fn generate(
        &self,
        ctx: &Context<'_>,
        sampling: &SamplingParams,
        rng: &mut dyn RngCore,
    ) -> Result<Completion, PolicyError> {
        (**self).generate(ctx, sampling, rng)
    }

    fn reflect(
        &self,
        request: &ReflectionRequest<'_>,
        sampling: &SamplingParams,
        rng: &mut dyn RngCore,
    ) -> Result<Completion, PolicyError> {
        (**self).reflect(request, sampling, rng)
    }
}
