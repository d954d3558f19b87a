use std::path::Path;
use std::process::{Command, Output};

fn erl(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erl"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_BACKTRACE", "0")
        .env_remove("ERL_ENDPOINT")
        .env_remove("ERL_API_KEY")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn small_lakes(dir: &Path) {
    ok(&erl(
        &["gen-dataset", "--env", "frozenlake", "--train-count", "12", "--eval-count", "3", "--lake-max", "4", "--out", "data"],
        dir,
    ));
}

const CONFIG: &str = "env = \"frozenlake\"\nalgo = \"erl\"\niterations = 6\nseed = 1\n\
    train_data = \"data/frozenlake_train.jsonl\"\neval_data = \"data/frozenlake_eval.jsonl\"\noutput_dir = \"run\"\n\
    [trainer]\nlearning_rate = 10.0\nbatch_size = 4\n";

#[test]
fn gen_dataset_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let stdout = ok(&erl(&["gen-dataset", "--env", "sokoban", "--train-count", "20", "--eval-count", "1", "--seed", "7", "--out", out], dir.path()));
        assert_eq!(stdout.lines().count(), 2);
    }
    for file in ["sokoban_train.jsonl", "sokoban_eval.jsonl"] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        assert_eq!(a, std::fs::read(dir.path().join("b").join(file)).unwrap());
    }
    let eval = std::fs::read_to_string(dir.path().join("a/sokoban_eval.jsonl")).unwrap();
    assert_eq!(eval.lines().count(), 1);
}

#[test]
fn train_then_eval_then_plot() {
    let dir = tempfile::tempdir().unwrap();
    small_lakes(dir.path());
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    let stdout = ok(&erl(&["train", "--config", "run.toml"], dir.path()));
    assert!(stdout.contains("final eval mean reward"), "{stdout}");

    let run = dir.path().join("run");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("iteration,wall_clock_s,split,phase,mean_reward,group_count,memory_changed"));
    let deploy: Vec<&str> = lines.filter(|l| l.contains(",eval,")).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(deploy, ["5"]);
    assert!(run.join("config.toml").exists());

    let stdout = ok(&erl(&["eval", "--checkpoint", "run/checkpoint.json", "--data", "data/frozenlake_eval.jsonl", "--samples", "2"], dir.path()));
    assert!(stdout.contains("over 6 episodes"), "{stdout}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["outcomes"].as_array().unwrap().len(), 6);

    ok(&erl(&["plot", "--metrics", "run/metrics.csv", "-o", "curves.svg"], dir.path()));
    let svg = std::fs::read_to_string(dir.path().join("curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") || svg.starts_with("<?xml"));
    assert!(svg.contains("<polyline") || svg.contains("<path"));
}

#[test]
fn eval_refuses_the_train_split() {
    let dir = tempfile::tempdir().unwrap();
    small_lakes(dir.path());
    std::fs::write(dir.path().join("run.toml"), CONFIG).unwrap();
    ok(&erl(&["train", "--config", "run.toml", "--iterations", "1"], dir.path()));
    let out = erl(&["eval", "--checkpoint", "run/checkpoint.json", "--data", "data/frozenlake_train.jsonl"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("split"));
}

#[test]
fn invalid_configs_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), CONFIG.replace("learning_rate = 10.0", "learning_rate = -1.0")).unwrap();
    let out = erl(&["train", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("trainer.learning_rate"));

    std::fs::write(dir.path().join("qa.toml"), CONFIG.replace("frozenlake\"\nalgo", "qa\"\nalgo")).unwrap();
    let out = erl(&["train", "--config", "qa.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("backend"));

    let out = erl(&["train", "--config", "bad.toml", "--algo", "rlvr", "--ablate", "no-memory"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("trainer.ablation"));
}
