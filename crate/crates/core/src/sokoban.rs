//! Single-box Sokoban on a walled board.
//!
//! Codes: `A` player, `a` player on the goal tile, `B` box, `b` box on goal,
//! `C` empty goal, `E` wall, `D` floor.

use std::collections::{HashMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    parse_action, Direction, EnvError, EnvInstance, Environment, Episode, Pos, StepOutcome, ACTIONS,
    MAX_STEPS_FEEDBACK,
};
use crate::prompts;

pub const SOLVED_FEEDBACK: &str = "The agent solved the puzzle (all boxes on goals).";
pub const MOVED_FEEDBACK: &str = "The agent moved or pushed a box; puzzle not solved yet.";
pub const BLOCKED_FEEDBACK: &str =
    "The agent did not move (likely hit a wall or tried to push into a blocked space).";

pub const FEEDBACK: [&str; 4] = [SOLVED_FEEDBACK, MOVED_FEEDBACK, BLOCKED_FEEDBACK, MAX_STEPS_FEEDBACK];

pub const STEP_BUDGET: usize = 8;
pub const MAX_SOLUTION: usize = 8;
pub const MAX_GENERATION_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SokobanInstance {
    pub rows: usize,
    pub cols: usize,
    pub goal: Pos,
    pub box_pos: Pos,
    pub player: Pos,
    pub min_solution: usize,
}

/// On-disk payload: square boards only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SokobanPayload {
    pub n: usize,
    pub goal: Pos,
    #[serde(rename = "box")]
    pub box_pos: Pos,
    pub player: Pos,
    pub min_solution: usize,
}

impl SokobanInstance {
    pub fn is_wall(&self, (r, c): Pos) -> bool {
        r == 0 || c == 0 || r + 1 >= self.rows || c + 1 >= self.cols
    }

    pub fn to_payload(&self) -> SokobanPayload {
        SokobanPayload {
            n: self.rows,
            goal: self.goal,
            box_pos: self.box_pos,
            player: self.player,
            min_solution: self.min_solution,
        }
    }

    pub fn from_payload(instance: &EnvInstance) -> Result<Self, EnvError> {
        let bad = |reason: String| EnvError::Payload { id: instance.id.clone(), reason };
        let p: SokobanPayload =
            serde_json::from_value(instance.payload.clone()).map_err(|e| bad(e.to_string()))?;
        if !(6..=8).contains(&p.n) {
            return Err(bad(format!("board side {} outside [6, 8]", p.n)));
        }
        let inst = SokobanInstance {
            rows: p.n,
            cols: p.n,
            goal: p.goal,
            box_pos: p.box_pos,
            player: p.player,
            min_solution: p.min_solution,
        };
        let cells = [inst.goal, inst.box_pos, inst.player];
        if cells.iter().any(|&c| inst.is_wall(c) || c.0 >= inst.rows || c.1 >= inst.cols) {
            return Err(bad("goal, box and player must be interior cells".into()));
        }
        if inst.goal == inst.box_pos || inst.goal == inst.player || inst.box_pos == inst.player {
            return Err(bad("goal, box and player must be distinct".into()));
        }
        match sokoban_min_solution(&inst) {
            Some(k) if k == inst.min_solution && (1..=MAX_SOLUTION).contains(&k) => Ok(inst),
            other => Err(bad(format!(
                "recorded min_solution {} disagrees with search result {other:?}",
                inst.min_solution
            ))),
        }
    }
}

/// Moves the player one cell, pushing the box when the cell beyond it is free.
/// Returns `None` for a blocked move.
pub fn push_move(inst: &SokobanInstance, player: Pos, box_pos: Pos, dir: Direction) -> Option<(Pos, Pos)> {
    let target = dir.apply(player, inst.rows, inst.cols)?;
    if inst.is_wall(target) {
        return None;
    }
    if target != box_pos {
        return Some((target, box_pos));
    }
    let beyond = dir.apply(box_pos, inst.rows, inst.cols)?;
    if inst.is_wall(beyond) {
        return None;
    }
    Some((target, beyond))
}

/// Optimal plan by breadth-first search over joint (player, box) states.
pub fn sokoban_solve(inst: &SokobanInstance) -> Option<Vec<Direction>> {
    let start = (inst.player, inst.box_pos);
    if inst.box_pos == inst.goal {
        return Some(Vec::new());
    }
    let mut parent: HashMap<(Pos, Pos), ((Pos, Pos), Direction)> = HashMap::new();
    let mut queue = VecDeque::from([start]);
    while let Some(state) = queue.pop_front() {
        for dir in Direction::ALL {
            let Some(next) = push_move(inst, state.0, state.1, dir) else {
                continue;
            };
            if next == start || parent.contains_key(&next) {
                continue;
            }
            parent.insert(next, (state, dir));
            if next.1 == inst.goal {
                let mut plan = vec![dir];
                let mut cur = state;
                while cur != start {
                    let (prev, d) = parent[&cur];
                    plan.push(d);
                    cur = prev;
                }
                plan.reverse();
                return Some(plan);
            }
            queue.push_back(next);
        }
    }
    None
}

pub fn sokoban_min_solution(inst: &SokobanInstance) -> Option<usize> {
    sokoban_solve(inst).map(|plan| plan.len())
}

pub fn generate_sokoban(seed: u64) -> Result<SokobanInstance, EnvError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(6..=8);
    let interior = n - 2;
    let pick = |rng: &mut ChaCha8Rng| (rng.gen_range(1..=interior), rng.gen_range(1..=interior));
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let goal = pick(&mut rng);
        let box_pos = pick(&mut rng);
        let player = pick(&mut rng);
        if goal == box_pos || goal == player || box_pos == player {
            continue;
        }
        let mut inst = SokobanInstance { rows: n, cols: n, goal, box_pos, player, min_solution: 0 };
        if let Some(k) = sokoban_min_solution(&inst) {
            if (1..=MAX_SOLUTION).contains(&k) {
                inst.min_solution = k;
                return Ok(inst);
            }
        }
    }
    Err(EnvError::Generation { seed, attempts: MAX_GENERATION_ATTEMPTS })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SokobanState {
    pub instance: Arc<SokobanInstance>,
    pub player: Pos,
    pub box_pos: Pos,
    pub steps_taken: usize,
    pub terminal: bool,
}

impl SokobanState {
    pub fn new(instance: Arc<SokobanInstance>) -> Self {
        SokobanState {
            player: instance.player,
            box_pos: instance.box_pos,
            instance,
            steps_taken: 0,
            terminal: false,
        }
    }
}

/// # Panics
///
/// When called on a terminal state.
pub fn sokoban_step(state: &mut SokobanState, action: Option<Direction>) -> StepOutcome {
    assert!(!state.terminal, "sokoban_step called on a terminal state");
    state.steps_taken += 1;
    let moved = action.and_then(|d| push_move(&state.instance, state.player, state.box_pos, d));
    let (feedback, reward, terminal) = match moved {
        Some((player, box_pos)) => {
            state.player = player;
            state.box_pos = box_pos;
            if box_pos == state.instance.goal {
                (SOLVED_FEEDBACK, 1.0, true)
            } else {
                (MOVED_FEEDBACK, 0.0, false)
            }
        }
        None => (BLOCKED_FEEDBACK, 0.0, false),
    };
    let (feedback, terminal) = if !terminal && state.steps_taken >= STEP_BUDGET {
        (MAX_STEPS_FEEDBACK, true)
    } else {
        (feedback, terminal)
    };
    state.terminal = terminal;
    StepOutcome { observation: observation_text(state), feedback, reward, terminal }
}

pub fn render_sokoban(state: &SokobanState) -> String {
    let inst = &state.instance;
    (0..inst.rows)
        .map(|r| {
            (0..inst.cols)
                .map(|c| {
                    let pos = (r, c);
                    let on_goal = pos == inst.goal;
                    let ch = if inst.is_wall(pos) {
                        'E'
                    } else if pos == state.player {
                        if on_goal { 'a' } else { 'A' }
                    } else if pos == state.box_pos {
                        if on_goal { 'b' } else { 'B' }
                    } else if on_goal {
                        'C'
                    } else {
                        'D'
                    };
                    ch.to_string()
                })
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn observation_text(state: &SokobanState) -> String {
    format!(
        "Current Board ({}):\n{}\nPuzzle not solved yet. Provide the next move.\n\n{}",
        state.steps_taken,
        render_sokoban(state),
        prompts::GRID_TASK_FOOTER
    )
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Sokoban;

struct SokobanEpisode {
    state: SokobanState,
}

impl Episode for SokobanEpisode {
    fn observation(&self) -> String {
        observation_text(&self.state)
    }

    fn step(&mut self, model_output: &str) -> (Option<String>, StepOutcome) {
        let action = parse_action(model_output, &ACTIONS).and_then(Direction::from_name);
        let outcome = sokoban_step(&mut self.state, action);
        (action.map(|d| d.name().to_string()), outcome)
    }
}

impl Environment for Sokoban {
    fn name(&self) -> &'static str {
        "sokoban"
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
        let inst = SokobanInstance::from_payload(instance)?;
        Ok(Box::new(SokobanEpisode { state: SokobanState::new(Arc::new(inst)) }))
    }
}
