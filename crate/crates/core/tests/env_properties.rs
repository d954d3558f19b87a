use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use erl_core::env::{run_episode, Attempt, Direction, EnvInstance, Environment, Split};
use erl_core::frozenlake::{
    generate_lake, lake_has_path, lake_step, render_lake, FrozenLake, LakeInstance, LakeState, FROZEN_PROB_RANGE,
    GOAL_FEEDBACK, SIZE_RANGE,
};
use erl_core::harness::{deploy_rollouts, lake_instance, sokoban_instance};
use erl_core::policy::{Conditioning, SamplingParams, TabularPolicy};
use erl_core::sokoban::{generate_sokoban, render_sokoban, sokoban_step, Sokoban, SokobanState};

const GOLDEN_LAKE: &str = include_str!("golden/lake_seed42.json");

#[test]
fn seed_42_lake_matches_the_frozen_regression_file() {
    let golden: LakeInstance = serde_json::from_str(GOLDEN_LAKE).unwrap();
    assert_eq!(generate_lake(42, SIZE_RANGE, FROZEN_PROB_RANGE).unwrap(), golden);
}

#[test]
fn thousand_seeded_lakes_are_solvable() {
    for seed in 0..1000 {
        let lake = generate_lake(seed, SIZE_RANGE, FROZEN_PROB_RANGE).unwrap();
        assert!(lake_has_path(&lake), "seed {seed}");
        lake.validate().unwrap();
    }
}

/// Probability that a uniform random walk on the 2×2 hole-free lake
/// reaches the goal within 8 moves, by enumerating all 4^8 move strings.
fn uniform_success(start: (usize, usize), goal: (usize, usize)) -> f64 {
    let mut hits = 0u64;
    for code in 0..4u32.pow(8) {
        let mut pos = start;
        let mut c = code;
        for _ in 0..8 {
            let d = c % 4;
            c /= 4;
            pos = match d {
                0 if pos.0 > 0 => (pos.0 - 1, pos.1),
                1 if pos.0 < 1 => (pos.0 + 1, pos.1),
                2 if pos.1 > 0 => (pos.0, pos.1 - 1),
                3 if pos.1 < 1 => (pos.0, pos.1 + 1),
                _ => pos,
            };
            if pos == goal {
                hits += 1;
                break;
            }
        }
    }
    hits as f64 / 4f64.powi(8)
}

#[test]
fn uniform_agent_on_hole_free_2x2_matches_the_markov_chain() {
    let mut instances = Vec::new();
    let mut exact = Vec::new();
    for s in 0..4 {
        for g in 0..4 {
            if s == g {
                continue;
            }
            let mut cells = *b"DDDD";
            cells[s] = b'A';
            cells[g] = b'B';
            let lake = LakeInstance {
                n: 2,
                cells: String::from_utf8(cells.to_vec()).unwrap(),
                start: (s / 2, s % 2),
                goal: (g / 2, g % 2),
                frozen_prob: 0.75,
            };
            exact.push(uniform_success(lake.start, lake.goal));
            instances.push(lake_instance(format!("uniform-{s}{g}"), 0, Split::Eval, &lake));
        }
    }
    let expected = exact.iter().sum::<f64>() / exact.len() as f64;
    assert!(expected > 0.5, "goal is at most two moves away; got {expected}");

    // Zero logits are uniform at any temperature; top_p = 1 keeps all four.
    let policy = TabularPolicy::new(FrozenLake.action_space());
    let samples = 250;
    let report = deploy_rollouts(&policy, &FrozenLake, &instances, samples, &SamplingParams::training(), 11).unwrap();
    assert_eq!(report.outcomes.len(), instances.len() * samples);
    let n = report.outcomes.len() as f64;
    let sigma = (expected * (1.0 - expected) / n).sqrt();
    assert!(
        (report.mean_reward - expected).abs() < 5.0 * sigma,
        "empirical {} vs exact {expected} (σ {sigma})",
        report.mean_reward
    );
}

fn direction(i: u8) -> Option<Direction> {
    Direction::ALL.get(i as usize).copied()
}

fn lake_payload(seed: u64) -> EnvInstance {
    let lake = generate_lake(seed, 2..=6, FROZEN_PROB_RANGE).unwrap();
    lake_instance(format!("p-{seed}"), seed, Split::Train, &lake)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lake_dynamics_invariants(seed in 0u64..5000, moves in prop::collection::vec(0u8..5, 1..12)) {
        let lake = generate_lake(seed, SIZE_RANGE, FROZEN_PROB_RANGE).unwrap();
        let mut state = LakeState::new(Arc::new(lake));
        for m in moves {
            if state.terminal {
                break;
            }
            let o = lake_step(&mut state, direction(m));
            prop_assert!(o.reward == 0.0 || o.reward == 1.0);
            prop_assert_eq!(o.reward == 1.0, o.feedback == GOAL_FEEDBACK);
            prop_assert!(state.steps_taken <= 8);
            let frame = render_lake(&state);
            prop_assert!(frame.chars().all(|c| matches!(c, 'A' | 'B' | 'C' | 'D' | ' ' | '\n')));
        }
    }

    #[test]
    fn sokoban_dynamics_invariants(seed in 0u64..2000, moves in prop::collection::vec(0u8..5, 1..10)) {
        let inst = generate_sokoban(seed).unwrap();
        let mut state = SokobanState::new(Arc::new(inst));
        for m in moves {
            if state.terminal {
                break;
            }
            let before = (state.player, state.box_pos);
            let frame_before = render_sokoban(&state);
            let o = sokoban_step(&mut state, direction(m));
            let frame = render_sokoban(&state);
            let count = |chars: &[char]| frame.chars().filter(|c| chars.contains(c)).count();
            prop_assert_eq!(count(&['A', 'a']), 1);
            prop_assert_eq!(count(&['B', 'b']), 1);
            if o.feedback.starts_with("The agent did not move") {
                prop_assert_eq!((state.player, state.box_pos), before);
                prop_assert_eq!(frame, frame_before);
            }
        }
    }

    #[test]
    fn episodes_are_deterministic_bounded_and_closed(seed in 0u64..1000, sokoban in any::<bool>(), rng_seed in any::<u64>()) {
        let (env, instance): (&dyn Environment, EnvInstance) = if sokoban {
            let inst = generate_sokoban(seed).unwrap();
            (&Sokoban, sokoban_instance(format!("s-{seed}"), seed, Split::Train, &inst))
        } else {
            (&FrozenLake, lake_payload(seed))
        };
        let policy = TabularPolicy::new(env.action_space());
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            run_episode(env, &instance, &policy, &Conditioning::plain(), &SamplingParams::training(), env.budget(), Attempt::First, &mut rng)
                .unwrap()
        };
        let (a, b) = (run(), run());
        prop_assert_eq!(&a, &b);
        prop_assert!(a.steps.len() <= env.budget());
        prop_assert_eq!(a.truncated, a.final_reward == 0.0 && a.steps.len() == env.budget() && a.final_feedback() == "Hit the max step limit");
        for step in &a.steps {
            prop_assert!(env.feedback_set().contains(&step.feedback.as_str()), "{:?}", step.feedback);
        }
    }
}
