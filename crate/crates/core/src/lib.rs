//! Experiential reinforcement learning over sparse-reward text environments.
//!
//! Environments ([`frozenlake`], [`sokoban`], [`qa`]) share the episode
//! protocol in [`env`]. Decision backends live in [`policy`]; the gated
//! attempt → reflection → retry → internalization loop lives in [`trainer`];
//! dataset generation, training runs, evaluation and metrics live in
//! [`harness`].

pub mod env;
pub mod frozenlake;
pub mod harness;
pub mod policy;
pub mod prompts;
pub mod qa;
pub mod sokoban;
pub mod trainer;

pub use env::{
    parse_action, run_episode, Attempt, EnvError, EnvInstance, Environment, Episode, EpisodeError, EpisodeTrace,
    Split, StepOutcome, TraceStep,
};
pub use policy::{
    Backend, Completion, Conditioning, Context, ContextKey, Guidance, Policy, PolicyError, SamplingParams,
    TabularPolicy,
};
