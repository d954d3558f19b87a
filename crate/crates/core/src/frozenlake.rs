//! Procedural FrozenLake with abstract symbols.
//!
//! Codes: `A` agent, `B` goal, `C` hole, `D` frozen (safe). Transitions are
//! deterministic and the only reward is 1.0 on reaching the goal.

use std::collections::VecDeque;
use std::ops::{Range, RangeInclusive};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    parse_action, Direction, EnvError, EnvInstance, Environment, Episode, Pos, StepOutcome, ACTIONS,
    MAX_STEPS_FEEDBACK,
};
use crate::prompts;

pub const GOAL_FEEDBACK: &str = "The agent reached the goal";
pub const HOLE_FEEDBACK: &str = "The agent fell into the hole";
pub const INVALID_FEEDBACK: &str = "No valid actions were recorded.";
/// Non-terminal, effective move. The enumerated feedback set has no message
/// for it, so the history records an empty feedback string.
pub const MOVED_FEEDBACK: &str = "";

pub const FEEDBACK: [&str; 5] =
    [GOAL_FEEDBACK, HOLE_FEEDBACK, MAX_STEPS_FEEDBACK, INVALID_FEEDBACK, MOVED_FEEDBACK];

pub const STEP_BUDGET: usize = 8;
pub const SIZE_RANGE: RangeInclusive<usize> = 2..=9;
pub const FROZEN_PROB_RANGE: Range<f64> = 0.6..0.85;
pub const MAX_GENERATION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LakeInstance {
    pub n: usize,
    /// Row-major `n·n` codes with `A` on the start cell and `B` on the goal.
    pub cells: String,
    pub start: Pos,
    pub goal: Pos,
    pub frozen_prob: f64,
}

impl LakeInstance {
    pub fn tile(&self, (r, c): Pos) -> u8 {
        self.cells.as_bytes()[r * self.n + c]
    }

    pub fn is_hole(&self, pos: Pos) -> bool {
        self.tile(pos) == b'C'
    }

    pub fn from_payload(instance: &EnvInstance) -> Result<Self, EnvError> {
        let lake: LakeInstance =
            serde_json::from_value(instance.payload.clone()).map_err(|e| EnvError::Payload {
                id: instance.id.clone(),
                reason: e.to_string(),
            })?;
        lake.validate().map_err(|reason| EnvError::Payload { id: instance.id.clone(), reason })?;
        Ok(lake)
    }

    pub fn validate(&self) -> Result<(), String> {
        if !SIZE_RANGE.contains(&self.n) {
            return Err(format!("grid side {} outside [2, 9]", self.n));
        }
        if self.cells.len() != self.n * self.n {
            return Err(format!("expected {} cells, found {}", self.n * self.n, self.cells.len()));
        }
        if let Some(bad) = self.cells.chars().find(|c| !matches!(c, 'A' | 'B' | 'C' | 'D')) {
            return Err(format!("unknown cell code {bad:?}"));
        }
        let count = |code| self.cells.bytes().filter(|&b| b == code).count();
        if count(b'A') != 1 || count(b'B') != 1 {
            return Err("exactly one A and one B required".into());
        }
        let in_bounds = |(r, c): Pos| r < self.n && c < self.n;
        if !in_bounds(self.start) || !in_bounds(self.goal) || self.start == self.goal {
            return Err("start and goal must be distinct in-bounds cells".into());
        }
        if self.tile(self.start) != b'A' || self.tile(self.goal) != b'B' {
            return Err("start/goal disagree with the cell codes".into());
        }
        if !lake_has_path(self) {
            return Err("no start-to-goal path".into());
        }
        Ok(())
    }
}

/// Samples a solvable lake. The size and frozen probability are drawn once;
/// the layout (start, goal, holes) is redrawn until a path exists.
pub fn generate_lake(
    seed: u64,
    n_range: RangeInclusive<usize>,
    p_range: Range<f64>,
) -> Result<LakeInstance, EnvError> {
    if n_range.is_empty() || *n_range.start() < 2 || *n_range.end() > 9 {
        return Err(EnvError::Range(format!("grid sizes {n_range:?} not within [2, 9]")));
    }
    if p_range.is_empty() || p_range.start < 0.6 || p_range.end > 0.85 {
        return Err(EnvError::Range(format!("frozen probability {p_range:?} not within [0.6, 0.85)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(n_range);
    let frozen_prob = rng.gen_range(p_range);
    let cells_total = n * n;

    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let start_idx = rng.gen_range(0..cells_total);
        let mut goal_idx = rng.gen_range(0..cells_total - 1);
        if goal_idx >= start_idx {
            goal_idx += 1;
        }
        let cells: String = (0..cells_total)
            .map(|i| {
                if i == start_idx {
                    'A'
                } else if i == goal_idx {
                    'B'
                } else if rng.gen_bool(frozen_prob) {
                    'D'
                } else {
                    'C'
                }
            })
            .collect();
        let lake = LakeInstance {
            n,
            cells,
            start: (start_idx / n, start_idx % n),
            goal: (goal_idx / n, goal_idx % n),
            frozen_prob,
        };
        if lake_has_path(&lake) {
            return Ok(lake);
        }
    }
    Err(EnvError::Generation { seed, attempts: MAX_GENERATION_ATTEMPTS })
}

/// Breadth-first search over non-hole cells with 4-connectivity.
pub fn lake_has_path(lake: &LakeInstance) -> bool {
    let n = lake.n;
    let mut seen = vec![false; n * n];
    let mut queue = VecDeque::from([lake.start]);
    seen[lake.start.0 * n + lake.start.1] = true;
    while let Some(pos) = queue.pop_front() {
        if pos == lake.goal {
            return true;
        }
        for dir in Direction::ALL {
            if let Some(next) = dir.apply(pos, n, n) {
                let idx = next.0 * n + next.1;
                if !seen[idx] && !lake.is_hole(next) {
                    seen[idx] = true;
                    queue.push_back(next);
                }
            }
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq)]
pub struct LakeState {
    pub instance: Arc<LakeInstance>,
    pub agent: Pos,
    pub steps_taken: usize,
    pub terminal: bool,
}

impl LakeState {
    pub fn new(instance: Arc<LakeInstance>) -> Self {
        let agent = instance.start;
        LakeState { instance, agent, steps_taken: 0, terminal: false }
    }
}

/// Advances the lake by one action. `None` stands for a parse failure.
///
/// # Panics
///
/// When called on a terminal state.
pub fn lake_step(state: &mut LakeState, action: Option<Direction>) -> StepOutcome {
    assert!(!state.terminal, "lake_step called on a terminal state");
    state.steps_taken += 1;
    let n = state.instance.n;
    let target = action.and_then(|d| d.apply(state.agent, n, n));

    let (feedback, reward, terminal) = match target {
        Some(pos) => {
            state.agent = pos;
            if pos == state.instance.goal {
                (GOAL_FEEDBACK, 1.0, true)
            } else if state.instance.is_hole(pos) {
                (HOLE_FEEDBACK, 0.0, true)
            } else {
                (MOVED_FEEDBACK, 0.0, false)
            }
        }
        None => (INVALID_FEEDBACK, 0.0, false),
    };
    // Tile effects take precedence over the budget cutoff.
    let (feedback, terminal) = if !terminal && state.steps_taken >= STEP_BUDGET {
        (MAX_STEPS_FEEDBACK, true)
    } else {
        (feedback, terminal)
    };
    state.terminal = terminal;
    StepOutcome { observation: observation_text(state), feedback, reward, terminal }
}

/// Rows of space-separated codes; the agent occludes the tile it stands on.
pub fn render_lake(state: &LakeState) -> String {
    let lake = &state.instance;
    let mut rows = Vec::with_capacity(lake.n);
    for r in 0..lake.n {
        let row: Vec<String> = (0..lake.n)
            .map(|c| {
                let ch = if (r, c) == state.agent {
                    'A'
                } else {
                    match lake.tile((r, c)) {
                        b'A' => 'D',
                        other => other as char,
                    }
                };
                ch.to_string()
            })
            .collect();
        rows.push(row.join(" "));
    }
    rows.join("\n")
}

pub fn observation_text(state: &LakeState) -> String {
    format!(
        "Current Observation ({}):\n{}\nYou have not achieved the goal yet. Please give the next action.\n\n{}",
        state.steps_taken,
        render_lake(state),
        prompts::GRID_TASK_FOOTER
    )
}

#[derive(Debug, Default, Clone, Copy)]
pub struct FrozenLake;

struct LakeEpisode {
    state: LakeState,
}

impl Episode for LakeEpisode {
    fn observation(&self) -> String {
        observation_text(&self.state)
    }

    fn step(&mut self, model_output: &str) -> (Option<String>, StepOutcome) {
        let action = parse_action(model_output, &ACTIONS).and_then(Direction::from_name);
        let outcome = lake_step(&mut self.state, action);
        (action.map(|d| d.name().to_string()), outcome)
    }
}

impl Environment for FrozenLake {
    fn name(&self) -> &'static str {
        "frozenlake"
    }

    fn system_prompt(&self) -> &'static str {
        prompts::GRID_SYSTEM
    }

    fn action_space(&self) -> &'static [&'static str] {
        &ACTIONS
    }

    fn budget(&self) -> usize {
        STEP_BUDGET
    }

    fn feedback_set(&self) -> &'static [&'static str] {
        &FEEDBACK
    }

    fn start<'a>(&'a self, instance: &EnvInstance) -> Result<Box<dyn Episode + 'a>, EnvError> {
        let lake = LakeInstance::from_payload(instance)?;
        Ok(Box::new(LakeEpisode { state: LakeState::new(Arc::new(lake)) }))
    }
}
