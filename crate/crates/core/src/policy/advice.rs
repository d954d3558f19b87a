//! Line-oriented advice used by the verification backend.
//!
//! ```text
//! AVOID:(r,c)            never step onto cell (r,c)
//! BLOCKED:<Action>@(r,c) the action is a no-op from (r,c)
//! RETRY:EXPLORE          nothing specific was learned
//! ```

use crate::env::{parse_grid, Direction, EpisodeTrace, GridView, Pos};
use crate::{frozenlake, sokoban};

pub const EXPLORE_SENTINEL: &str = "RETRY:EXPLORE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Advice {
    Avoid(Pos),
    Blocked(Direction, Pos),
    Explore,
}

impl std::fmt::Display for Advice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Advice::Avoid((r, c)) => write!(f, "AVOID:({r},{c})"),
            Advice::Blocked(d, (r, c)) => write!(f, "BLOCKED:{d}@({r},{c})"),
            Advice::Explore => f.write_str(EXPLORE_SENTINEL),
        }
    }
}

fn parse_pos(s: &str) -> Option<Pos> {
    let inner = s.trim().strip_prefix('(')?.strip_suffix(')')?;
    let (r, c) = inner.split_once(',')?;
    Some((r.trim().parse().ok()?, c.trim().parse().ok()?))
}

impl std::str::FromStr for Advice {
    type Err = ();

    fn from_str(line: &str) -> Result<Self, ()> {
        let line = line.trim();
        if line == EXPLORE_SENTINEL {
            return Ok(Advice::Explore);
        }
        if let Some(rest) = line.strip_prefix("AVOID:") {
            return parse_pos(rest).map(Advice::Avoid).ok_or(());
        }
        if let Some(rest) = line.strip_prefix("BLOCKED:") {
            let (dir, pos) = rest.split_once('@').ok_or(())?;
            let dir = Direction::from_name(dir).ok_or(())?;
            return parse_pos(pos).map(|p| Advice::Blocked(dir, p)).ok_or(());
        }
        Err(())
    }
}

/// Every well-formed advice line in `text`; other lines are ignored.
pub fn parse_advice(text: &str) -> Vec<Advice> {
    text.lines().filter_map(|l| l.parse().ok()).collect()
}

fn agent_pos(grid: &GridView) -> Option<Pos> {
    grid.find(&['A', 'a'])
}

/// Deterministic advice derived from a failed attempt: the hole that was
/// entered and every no-op move, in order of occurrence.
pub fn scripted_reflector(trace: &EpisodeTrace) -> String {
    let mut found: Vec<Advice> = Vec::new();
    for step in &trace.steps {
        let Some(dir) = step.action.as_deref().and_then(Direction::from_name) else {
            continue;
        };
        let Some(grid) = parse_grid(&step.observation) else {
            continue;
        };
        let Some(pos) = agent_pos(&grid) else {
            continue;
        };
        let advice = match step.feedback.as_str() {
            frozenlake::HOLE_FEEDBACK => dir.apply(pos, grid.rows(), grid.cols()).map(Advice::Avoid),
            frozenlake::INVALID_FEEDBACK | sokoban::BLOCKED_FEEDBACK => Some(Advice::Blocked(dir, pos)),
            _ => None,
        };
        if let Some(a) = advice {
            if !found.contains(&a) {
                found.push(a);
            }
        }
    }
    if found.is_empty() {
        return EXPLORE_SENTINEL.to_string();
    }
    found.iter().map(Advice::to_string).collect::<Vec<_>>().join("\n")
}

/// Whether remembered advice still holds on the board shown in `task`.
fn applies(env_name: &str, advice: Advice, grid: &GridView) -> bool {
    match advice {
        Advice::Avoid(pos) => env_name == "frozenlake" && grid.at(pos) == Some('C'),
        Advice::Blocked(dir, pos) => {
            if grid.at(pos).is_none() {
                return false;
            }
            match dir.apply(pos, grid.rows(), grid.cols()) {
                None => true,
                Some(next) => grid.at(next) == Some('E'),
            }
        }
        Advice::Explore => false,
    }
}

/// Reflection of the verification backend: fresh advice from the attempt,
/// followed by memory lines that still apply to the current board.
pub fn compose_reflection(env_name: &str, task: &str, trace: &EpisodeTrace, memory: Option<&str>) -> String {
    let mut lines: Vec<Advice> = parse_advice(&scripted_reflector(trace))
        .into_iter()
        .filter(|a| *a != Advice::Explore)
        .collect();
    if let (Some(memory), Some(grid)) = (memory, parse_grid(task)) {
        for a in parse_advice(memory) {
            if applies(env_name, a, &grid) && !lines.contains(&a) {
                lines.push(a);
            }
        }
    }
    if lines.is_empty() {
        return EXPLORE_SENTINEL.to_string();
    }
    lines.iter().map(Advice::to_string).collect::<Vec<_>>().join("\n")
}

/// Bitmask over `action_space` of actions the advice permits at the agent's
/// position in `observation`. When advice would forbid everything, all
/// actions are permitted.
pub fn action_mask(advice: &[Advice], observation: &str, action_space: &[&str]) -> u32 {
    let all = if action_space.len() >= 32 { u32::MAX } else { (1u32 << action_space.len()) - 1 };
    if advice.is_empty() {
        return all;
    }
    let Some(grid) = parse_grid(observation) else { return all };
    let Some(pos) = agent_pos(&grid) else { return all };
    let mut mask = all;
    for (i, name) in action_space.iter().enumerate() {
        let Some(dir) = Direction::from_name(name) else { continue };
        let target = dir.apply(pos, grid.rows(), grid.cols());
        let forbidden = advice.iter().any(|a| match *a {
            Advice::Avoid(cell) => target == Some(cell),
            Advice::Blocked(d, at) => d == dir && at == pos,
            Advice::Explore => false,
        });
        if forbidden {
            mask &= !(1 << i);
        }
    }
    if mask == 0 {
        all
    } else {
        mask
    }
}
