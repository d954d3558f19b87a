//! Episode protocol shared by every environment.
//!
//! An [`Environment`] hands out [`Episode`]s for immutable [`EnvInstance`]s.
//! The runner in [`run_episode`] drives the observe → generate → parse → step
//! loop and records an [`EpisodeTrace`].

mod dataset;
mod episode;
mod grid;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use dataset::{read_jsonl, write_jsonl, DatasetError};
pub use episode::{run_episode, EpisodeError};
pub use grid::{parse_grid, Direction, GridView, Pos, ACTIONS};

/// Shared by both grid environments when the step budget runs out.
pub const MAX_STEPS_FEEDBACK: &str = "Hit the max step limit";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("instance {id}: malformed payload: {reason}")]
    Payload { id: String, reason: String },
    #[error("generation failed for seed {seed} after {attempts} attempts")]
    Generation { seed: u64, attempts: usize },
    #[error("invalid generator range: {0}")]
    Range(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
        })
    }
}

/// An immutable task specification. The payload is environment specific and
/// decoded lazily by the owning environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvInstance {
    pub id: String,
    pub seed: u64,
    pub split: Split,
    pub payload: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observation: String,
    pub feedback: &'static str,
    pub reward: f64,
    pub terminal: bool,
}

/// One observe/act/feedback exchange.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub observation: String,
    pub output: String,
    /// Canonical action name, `None` on parse failure.
    pub action: Option<String>,
    pub feedback: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attempt {
    #[serde(rename = "1")]
    First,
    #[serde(rename = "2")]
    Second,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub instance_id: String,
    pub steps: Vec<TraceStep>,
    pub final_reward: f64,
    pub truncated: bool,
    pub attempt: Attempt,
}

impl EpisodeTrace {
    pub fn final_feedback(&self) -> &str {
        self.steps.last().map(|s| s.feedback.as_str()).unwrap_or("")
    }

    /// The initial observation, i.e. the task input `x` as the policy saw it.
    pub fn task(&self) -> &str {
        self.steps.first().map(|s| s.observation.as_str()).unwrap_or("")
    }

    /// Plain-text transcript used in retry prompts and reflection requests.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for (i, step) in self.steps.iter().enumerate() {
            out.push_str(&format!("### Step {i}\n{}\n", step.observation));
            out.push_str(&format!("Action: {}\n", step.output));
            out.push_str(&format!("Feedback: {}\n", step.feedback));
        }
        out.push_str(&format!("Reward: {}\n", self.final_reward));
        out
    }
}

/// A running episode. Implementations own their mutable state.
pub trait Episode: Send {
    /// The full observation text presented to the policy for the next step.
    fn observation(&self) -> String;

    /// Parses the raw model output and advances the episode. Returns the
    /// canonical action name (or `None` on parse failure) with the outcome.
    fn step(&mut self, model_output: &str) -> (Option<String>, StepOutcome);
}

pub trait Environment: Send + Sync {
    fn name(&self) -> &'static str;
    fn system_prompt(&self) -> &'static str;
    /// Finite action vocabulary; empty for free-form environments.
    fn action_space(&self) -> &'static [&'static str];
    fn budget(&self) -> usize;
    fn feedback_set(&self) -> &'static [&'static str];
    /// JSON tool schema offered to remote backends, when the environment has tools.
    fn tools(&self) -> Option<serde_json::Value> {
        None
    }
    fn start<'a>(&'a self, instance: &EnvInstance) -> Result<Box<dyn Episode + 'a>, EnvError>;
}

/// Extracts the content of the last triple-backtick block and matches it
/// case-insensitively against the action space.
pub fn parse_action<'a>(model_output: &str, action_space: &[&'a str]) -> Option<&'a str> {
    let block = last_fenced_block(model_output)?;
    let wanted = block.trim();
    action_space
        .iter()
        .copied()
        .find(|a| a.eq_ignore_ascii_case(wanted))
}

fn last_fenced_block(text: &str) -> Option<&str> {
    let fences: Vec<usize> = text.match_indices("```").map(|(i, _)| i).collect();
    if fences.len() < 2 {
        return None;
    }
    // Fences pair up in order; an unmatched trailing fence is ignored.
    let pairs = fences.len() / 2;
    let open = fences[2 * (pairs - 1)];
    let close = fences[2 * (pairs - 1) + 1];
    Some(&text[open + 3..close])
}
