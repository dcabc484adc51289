mod common;

use std::path::Path;
use std::process::{Command, Output};

fn cli(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unlearn-forge"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stages_run_once_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, common::tiny_config(&dir.path().join("run"))).unwrap();

    for stage in [
        "generate-canon",
        "tokenize",
        "pretrain",
        "reinforce",
        "gen-labels",
        "unlearn",
    ] {
        let o = cli(&config, &[stage]);
        assert!(
            o.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        assert_eq!(stdout(&o).trim(), format!("{stage}: done"));
    }
    let o = cli(&config, &["pretrain"]);
    assert_eq!(stdout(&o).trim(), "pretrain: up to date");

    let reports = std::fs::read_to_string(dir.path().join("run/full/reports.jsonl")).unwrap();
    let o = cli(&config, &["run-all"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o),
        reports,
        "run-all after the stages only replays the reports"
    );

    // Changing an unlearning parameter reruns only the unlearning stage.
    let o = cli(&config, &["--set", "unlearn.max_steps=3", "unlearn"]);
    assert_eq!(stdout(&o).trim(), "unlearn: done");
    let o = cli(&config, &["--set", "unlearn.max_steps=3", "gen-labels"]);
    assert_eq!(stdout(&o).trim(), "gen-labels: up to date");

    let o = cli(&config, &["eval", "--step", "7"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(report["step"], 7);

    let o = cli(&config, &["dump-translation", "--block", "0"]);
    assert!(o.status.success());
    assert!(stdout(&o).lines().count() > 1);
}

#[test]
fn show_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    std::fs::write(&config, common::tiny_config(&dir.path().join("run"))).unwrap();
    let o = cli(&config, &["--set", "alpha=2.5", "show-config"]);
    assert!(o.status.success());
    let shown = dir.path().join("shown.toml");
    std::fs::write(&shown, stdout(&o)).unwrap();
    let again = cli(&shown, &["show-config"]);
    assert_eq!(stdout(&again), stdout(&o));
    assert!(stdout(&o).contains("alpha = 2.5"));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "no_such_field = 1\n").unwrap();
    assert_eq!(cli(&config, &["show-config"]).status.code(), Some(2));

    std::fs::write(&config, common::tiny_config(&dir.path().join("run"))).unwrap();
    // Pretraining before the tokenizer exists is a stage failure.
    assert_eq!(cli(&config, &["pretrain"]).status.code(), Some(3));

    let o = cli(
        &config,
        &["--set", "eval.judge_url=\"http://127.0.0.1:9\"", "run-all"],
    );
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}
