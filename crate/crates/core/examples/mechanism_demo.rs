//! Scaled-down ERL vs RLVR comparison on a fixed pool of 4×4 lakes.
//!
//! ```text
//! cargo run --release -p erl-core --example mechanism_demo -- [iterations] [lr]
//! ```

use erl_core::env::{EnvInstance, Split};
use erl_core::frozenlake::{generate_lake, FrozenLake, FROZEN_PROB_RANGE};
use erl_core::harness::{deploy_rollouts, lake_instance, TrainingRun};
use erl_core::trainer::{Ablation, Algo, TrainerConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iterations: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10.0);
    let pool_base: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let pool: Vec<EnvInstance> = (0..20u64)
        .map(|i| {
            let lake = generate_lake(pool_base + i, 4..=4, FROZEN_PROB_RANGE).unwrap();
            lake_instance(format!("lake-{i:02}"), pool_base + i, Split::Train, &lake)
        })
        .collect();
    let env = FrozenLake;
    let base = TrainerConfig { learning_rate: lr, batch_size: 20, ..Default::default() };
    let variants: [(&str, Algo, Option<Ablation>); 4] = [
        ("rlvr", Algo::Rlvr, None),
        ("erl", Algo::Erl, None),
        ("no-memory", Algo::Erl, Some(Ablation::NoMemory)),
        ("no-reflection", Algo::Erl, Some(Ablation::NoReflection)),
    ];
    for seed in 0..5u64 {
        let mut line = format!("seed {seed}:");
        for (name, algo, ablation) in variants {
            let config = TrainerConfig { ablation, ..base.clone() };
            let mut run = TrainingRun::tabular(&env, config.clone(), algo, seed);
            let mut gaps = Vec::new();
            for _ in 0..iterations {
                let r = run.step(&pool).unwrap();
                if let Some(r2) = r.attempt2_reward {
                    gaps.push(r2 - r.attempt1_reward);
                }
            }
            let eval = deploy_rollouts(run.learner().policy(), &env, &pool, config.eval_samples, &config.eval_sampling, seed)
                .unwrap();
            let min_gap = gaps.iter().skip(5).copied().fold(f64::INFINITY, f64::min);
            line.push_str(&format!("  {name}={:.3} (min gap {:.3})", eval.mean_reward, min_gap));
        }
        println!("{line}");
    }
}
