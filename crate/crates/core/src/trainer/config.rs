use std::fmt;

use serde::{Deserialize, Serialize};

use super::advantage::ADVANTAGE_EPS;
use super::loss::ClipParams;
use crate::policy::SamplingParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Erl,
    Rlvr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Reflections never see or update the memory.
    NoMemory,
    /// The second attempt gets the raw first attempt through the generic
    /// retry prompt instead of a reflection.
    NoReflection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Internalization {
    #[default]
    Distill,
    OnPolicyKl,
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algo::Erl => "erl",
            Algo::Rlvr => "rlvr",
        })
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::NoMemory => "no-memory",
            Ablation::NoReflection => "no-reflection",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub learning_rate: f64,
    /// Instances drawn per iteration.
    pub batch_size: usize,
    pub rollouts_rlvr: usize,
    pub rollouts_erl_per_attempt: usize,
    pub clip_upper: f64,
    pub clip_lower: f64,
    pub kl_coef: f64,
    pub advantage_eps: f64,
    pub tau_gate: f64,
    pub tau_store: f64,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub internalization: Internalization,
    pub ablation: Option<Ablation>,
    pub train_sampling: SamplingParams,
    pub eval_sampling: SamplingParams,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            learning_rate: 1e-6,
            batch_size: 64,
            rollouts_rlvr: 10,
            rollouts_erl_per_attempt: 4,
            clip_upper: 0.28,
            clip_lower: 0.2,
            kl_coef: 0.001,
            advantage_eps: ADVANTAGE_EPS,
            tau_gate: 1.0,
            tau_store: 1.0,
            eval_every: 5,
            eval_samples: 4,
            internalization: Internalization::Distill,
            ablation: None,
            train_sampling: SamplingParams::training(),
            eval_sampling: SamplingParams::validation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

fn check(errors: &mut Vec<FieldError>, ok: bool, field: &'static str, message: impl Into<String>) {
    if !ok {
        errors.push(FieldError { field, message: message.into() });
    }
}

fn check_sampling(errors: &mut Vec<FieldError>, s: &SamplingParams, field: &'static str) {
    check(errors, s.temperature > 0.0 && s.temperature.is_finite(), field, "temperature must be > 0");
    check(errors, s.top_p > 0.0 && s.top_p <= 1.0, field, "top_p must lie in (0, 1]");
    check(errors, s.max_tokens > 0, field, "max_tokens must be ≥ 1");
}

impl TrainerConfig {
    pub fn clip_params(&self) -> ClipParams {
        ClipParams { clip_lower: self.clip_lower, clip_upper: self.clip_upper, kl_coef: self.kl_coef }
    }

    pub fn validate(&self) -> Result<(), Vec<FieldError>> {
        let mut e = Vec::new();
        let pos = |v: f64| v > 0.0 && v.is_finite();
        check(&mut e, pos(self.learning_rate), "learning_rate", "must be > 0");
        check(&mut e, self.batch_size > 0, "batch_size", "must be ≥ 1");
        check(&mut e, self.rollouts_rlvr >= 2, "rollouts_rlvr", "groups need at least 2 rollouts");
        check(&mut e, self.rollouts_erl_per_attempt >= 2, "rollouts_erl_per_attempt", "groups need at least 2 rollouts");
        check(
            &mut e,
            2 * self.rollouts_erl_per_attempt <= self.rollouts_rlvr,
            "rollouts_erl_per_attempt",
            format!(
                "two attempts of {} exceed the compute-matched budget of {} rollouts",
                self.rollouts_erl_per_attempt, self.rollouts_rlvr
            ),
        );
        check(&mut e, pos(self.clip_upper), "clip_upper", "must be > 0");
        check(&mut e, pos(self.clip_lower) && self.clip_lower < 1.0, "clip_lower", "must lie in (0, 1)");
        check(&mut e, self.kl_coef >= 0.0 && self.kl_coef.is_finite(), "kl_coef", "must be ≥ 0");
        check(&mut e, pos(self.advantage_eps), "advantage_eps", "must be > 0");
        check(&mut e, self.tau_gate > 0.0 && self.tau_gate <= 1.0, "tau_gate", "must lie in (0, 1]");
        check(&mut e, self.tau_store > 0.0 && self.tau_store <= 1.0, "tau_store", "must lie in (0, 1]");
        check(&mut e, self.eval_every > 0, "eval_every", "must be ≥ 1");
        check(&mut e, self.eval_samples > 0, "eval_samples", "must be ≥ 1");
        check_sampling(&mut e, &self.train_sampling, "train_sampling");
        check_sampling(&mut e, &self.eval_sampling, "eval_sampling");
        if e.is_empty() {
            Ok(())
        } else {
            Err(e)
        }
    }
}
