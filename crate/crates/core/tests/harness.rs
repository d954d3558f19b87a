use std::cell::RefCell;

use rand::RngCore;

use erl_core::env::{parse_grid, EnvInstance, Split};
use erl_core::frozenlake::{generate_lake, FrozenLake, LakeInstance, FROZEN_PROB_RANGE};
use erl_core::harness::{
    evaluate, gen_dataset, generate_instances, lake_instance, DatasetSpec, EnvKind, HarnessError, MetricsRow,
    MetricsWriter, Phase, RunConfig, TrainingRun,
};
use erl_core::policy::{Backend, Completion, Context, PolicyError, SamplingParams};
use erl_core::trainer::{
    rlvr_iteration, Ablation, Algo, Checkpoint, Internalization, Learner, TrainerConfig, UpdateKind,
};
use erl_core::Policy;

fn pool(n: u64, split: Split) -> Vec<EnvInstance> {
    (0..n)
        .map(|i| {
            let lake = generate_lake(500 + i, 3..=4, FROZEN_PROB_RANGE).unwrap();
            lake_instance(format!("h-{split}-{i}"), 500 + i, split, &lake)
        })
        .collect()
}

fn fast_config() -> TrainerConfig {
    TrainerConfig { learning_rate: 10.0, batch_size: 6, ..Default::default() }
}

#[test]
fn run_emits_ordered_rows_with_eval_every_five() {
    let (train, eval) = (pool(8, Split::Train), pool(3, Split::Eval));
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("ck.json");
    let mut run = TrainingRun::tabular(&FrozenLake, fast_config(), Algo::Erl, 1);
    let rows = RefCell::new(Vec::<MetricsRow>::new());
    let last = run.run(&train, &eval, 12, Some(&ck), &mut |r| {
        rows.borrow_mut().push(r.clone());
        Ok(())
    });
    let last = last.unwrap().expect("evaluated at 5 and 10");
    let rows = rows.into_inner();

    let evals: Vec<usize> = rows.iter().filter(|r| r.phase == Phase::Deploy).map(|r| r.iteration).collect();
    assert_eq!(evals, [5, 10]);
    assert_eq!(last.outcomes.len(), eval.len() * 4, "4 samples per prompt");
    for w in rows.windows(2) {
        assert!((w[0].iteration, w[0].phase) < (w[1].iteration, w[1].phase), "{w:?}");
        assert!(w[0].wall_clock_s <= w[1].wall_clock_s);
    }
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_reward)));
    assert!(rows.iter().all(|r| (r.split == Split::Eval) == (r.phase == Phase::Deploy)));

    let saved = Checkpoint::load(&ck).unwrap();
    assert_eq!(saved, run.checkpoint());
    assert_eq!(saved.iteration, 12);
}

#[test]
fn metrics_csv_round_trips_through_the_writer() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m/metrics.csv");
    let mut w = MetricsWriter::create(&path).unwrap();
    let mut run = TrainingRun::tabular(&FrozenLake, fast_config(), Algo::Rlvr, 2);
    run.run(&pool(4, Split::Train), &pool(2, Split::Eval), 5, None, &mut |r| w.write(r)).unwrap();
    drop(w);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("iteration,wall_clock_s,split,phase,mean_reward,group_count,memory_changed\n"));
    let rows = erl_core::harness::read_metrics(&path).unwrap();
    // RLVR logs attempt1 only, plus the deploy row at iteration 5.
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.phase != Phase::Attempt2));
}

#[test]
fn evaluation_is_pure() {
    let (train, eval) = (pool(6, Split::Train), pool(3, Split::Eval));
    let mut run = TrainingRun::tabular(&FrozenLake, fast_config(), Algo::Erl, 4);
    for _ in 0..4 {
        run.step(&train).unwrap();
    }
    let before = run.checkpoint();
    let a = run.evaluate(&eval).unwrap();
    let b = run.evaluate(&eval).unwrap();
    assert_eq!(run.checkpoint(), before);
    assert_eq!(a, b);
}

#[test]
fn evaluation_refuses_train_instances() {
    let mut mixed = pool(2, Split::Eval);
    mixed.extend(pool(1, Split::Train));
    let run = TrainingRun::tabular(&FrozenLake, fast_config(), Algo::Erl, 0);
    assert!(matches!(run.evaluate(&mixed), Err(HarnessError::SplitMismatch { expected: Split::Eval, .. })));
    let mut bad = TrainingRun::tabular(&FrozenLake, fast_config(), Algo::Erl, 0);
    let err = bad.run(&pool(2, Split::Eval), &[], 1, None, &mut |_| Ok(())).unwrap_err();
    assert!(matches!(err, HarnessError::SplitMismatch { expected: Split::Train, .. }));
}

/// Walks straight to the goal using the rendered grid.
struct Oracle;

impl Policy for Oracle {
    fn backend(&self) -> Backend {
        Backend::Scripted
    }

    fn generate(&self, ctx: &Context<'_>, _: &SamplingParams, _: &mut dyn RngCore) -> Result<Completion, PolicyError> {
        let grid = parse_grid(ctx.observation).unwrap();
        let (a, g) = (grid.find(&['A']).unwrap(), grid.find(&['B']).unwrap());
        let action = if a.1 < g.1 {
            "Right"
        } else if a.1 > g.1 {
            "Left"
        } else if a.0 < g.0 {
            "Down"
        } else {
            "Up"
        };
        Ok(Completion { text: format!("```{action}```"), tokens: vec![action.into()], logprobs: None, backend: Backend::Scripted })
    }
}

#[test]
fn perfect_policy_scores_one() {
    // Hole-free boards, so the greedy walk always arrives within budget.
    let instances: Vec<EnvInstance> = (0..5)
        .map(|i| {
            let mut cells = vec![b'D'; 16];
            cells[i] = b'A';
            cells[15] = b'B';
            let lake = LakeInstance {
                n: 4,
                cells: String::from_utf8(cells).unwrap(),
                start: (i / 4, i % 4),
                goal: (3, 3),
                frozen_prob: 0.8,
            };
            lake_instance(format!("clear-{i}"), 0, Split::Eval, &lake)
        })
        .collect();
    let report = evaluate(&Oracle, &FrozenLake, &instances, 3, &SamplingParams::validation(), 0).unwrap();
    assert_eq!(report.mean_reward, 1.0);
    assert_eq!(report.outcomes.len(), 15);
}

#[test]
fn gate_and_memory_track_real_outcomes() {
    let train = pool(8, Split::Train);
    for ablation in [None, Some(Ablation::NoMemory), Some(Ablation::NoReflection)] {
        let config = TrainerConfig { ablation, ..fast_config() };
        let mut run = TrainingRun::tabular(&FrozenLake, config, Algo::Erl, 9);
        for _ in 0..8 {
            let r = run.step(&train).unwrap();
            let failed_first: usize = r
                .groups
                .iter()
                .filter(|g| g.kind == UpdateKind::Attempt1)
                .map(|g| g.rewards.iter().filter(|&&x| x < 1.0).count())
                .sum();
            assert_eq!(r.counters.second_attempts, failed_first);
            assert!(!r.memory_changed || r.counters.memory_stores > 0);
            if ablation.is_some() {
                assert!(run.memory().is_empty());
            }
            if ablation == Some(Ablation::NoReflection) {
                assert_eq!(r.counters.reflections, 0);
                assert!(!r.phases.contains(&UpdateKind::Reflection));
            } else {
                assert_eq!(r.counters.reflections, r.counters.second_attempts);
            }
            assert_eq!(r.phases.contains(&UpdateKind::Distill), r.counters.distill_positive > 0);
            let post = r.attempt2_reward.unwrap();
            assert!(post >= r.attempt1_reward);
        }
    }
}

#[test]
fn on_policy_kl_variant_trains() {
    let train = pool(6, Split::Train);
    let config = TrainerConfig { internalization: Internalization::OnPolicyKl, ..fast_config() };
    let mut run = TrainingRun::tabular(&FrozenLake, config, Algo::Erl, 3);
    for _ in 0..6 {
        run.step(&train).unwrap();
    }
    assert!(run.learner().tabular_policy().unwrap().is_finite());
}

#[test]
fn rlvr_groups_have_ten_rollouts() {
    let train = pool(3, Split::Train);
    let mut learner = Learner::tabular(erl_core::TabularPolicy::new(&["Up", "Down", "Left", "Right"]));
    let r = rlvr_iteration(&fast_config(), &mut learner, &FrozenLake, &train, 1, 0).unwrap();
    assert_eq!(r.counters.episodes, 30);
    assert!(r.groups.iter().all(|g| g.kind == UpdateKind::Attempt1 && g.rewards.len() == 10));
    assert_eq!(r.attempt2_reward, None);
}

#[test]
fn datasets_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = DatasetSpec { train_count: 50, eval_count: 10, ..DatasetSpec::new(EnvKind::Sokoban, 5) };
    let fa = gen_dataset(&spec, a.path()).unwrap();
    let fb = gen_dataset(&spec, b.path()).unwrap();
    assert_eq!(std::fs::read(&fa.train).unwrap(), std::fs::read(&fb.train).unwrap());
    assert_eq!(std::fs::read(&fa.eval).unwrap(), std::fs::read(&fb.eval).unwrap());
}

#[test]
fn default_counts_are_ten_thousand_and_one_hundred() {
    let (train, eval) = generate_instances(&DatasetSpec::new(EnvKind::FrozenLake, 0)).unwrap();
    assert_eq!((train.len(), eval.len()), (10_000, 100));
    let ids: std::collections::HashSet<&str> = train.iter().chain(&eval).map(|i| i.id.as_str()).collect();
    assert_eq!(ids.len(), 10_100);
}

#[test]
fn run_config_resolves_paths_and_reports_fields() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(
        &path,
        "env = \"frozenlake\"\niterations = 3\ntrain_data = \"d/train.jsonl\"\neval_data = \"d/eval.jsonl\"\noutput_dir = \"out\"\n\
         [trainer]\nlearning_rate = 2.0\n",
    )
    .unwrap();
    let config = RunConfig::load(&path).unwrap();
    assert_eq!(config.train_data, dir.path().join("d/train.jsonl"));
    assert_eq!(config.algo, Algo::Erl);
    config.validate().unwrap();

    let bad = RunConfig {
        iterations: 0,
        algo: Algo::Rlvr,
        env: EnvKind::Qa,
        trainer: TrainerConfig { ablation: Some(Ablation::NoMemory), tau_store: 1.5, ..config.trainer.clone() },
        ..config
    };
    let Err(HarnessError::Config(errors)) = bad.validate() else { panic!("expected diagnostics") };
    let fields: Vec<&str> = errors.iter().map(|e| e.split(':').next().unwrap()).collect();
    assert_eq!(fields, ["iterations", "backend", "trainer.ablation", "trainer.tau_store"]);
    assert!(RunConfig::from_toml("env = \"frozenlake\"\nunknown = 1\n").is_err());
}
