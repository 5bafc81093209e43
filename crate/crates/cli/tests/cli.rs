use std::path::Path;
use std::process::{Command, Output};

use bats_cli::workspace::Manifest;

fn bats(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bats"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("run");
    let cfg = serde_json::json!({
        "seed": 11,
        "env": {"name": "mountain_car"},
        "output_dir": out,
        "data": {"n_random": 8, "n_expert": 2, "episode_len": 150},
        "dynamics": {"hidden": [16], "reward_hidden": [8], "n_trained": 2, "n_kept": 1, "max_epochs": 3},
        "neighbors": {"knn": 5},
        "bats": {"n_iterations": 2, "samples_per_iter": 10, "stitch_budget": 5, "max_stitch_len": 2,
                 "cem": {"population": 20, "iterations": 2}},
        "harvest": {"threshold": -1000.0, "horizon": 150},
        "cloning": {"hidden": [16], "batch_updates": 20, "batch_size": 32},
        "evaluation": {"episodes": 2, "residual_starts": 3},
        "bounds": {"instances": 3}
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn missing_prerequisite_exits_3_and_names_the_producer() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = bats(&cfg, &["evaluate"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bats clone"), "{err}");
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"seed": 1, "env": {"name": "mountain_car"}, "discount": 1.5, "harvest": {"threshold": 0}}"#).unwrap();
    assert_eq!(bats(&path, &["gen-data"]).status.code(), Some(2));
    std::fs::write(&path, r#"{"seed": 1, "env": {"name": "mountain_car"}}"#).unwrap();
    assert_eq!(bats(&path, &["gen-data"]).status.code(), Some(2));
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = bats(&cfg, &["run-all"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.seed, 11);
    for f in ["dataset.jsonl", "dynamics.json", "mdp.json", "policy.json", "policy_raw.json", "evaluation.json", "bounds.json", "plots/value_map.csv"] {
        assert!(manifest.artifacts.contains_key(f), "manifest lacks {f}");
        assert!(run.join(f).is_file());
    }
    // Returns are histogrammed for choosing a threshold.
    assert!(String::from_utf8_lossy(&out.stderr).contains("graph returns"));

    let relabel = |c: &str| {
        let out = bats(&cfg, &["relabel", "--penalty-coefficient", c]);
        assert!(out.status.success());
        serde_json::from_slice::<serde_json::Value>(&out.stdout).unwrap()["mean_start_value_after"]
            .as_f64()
            .unwrap()
    };
    let mild = relabel("10");
    let harsh = relabel("1000");
    assert!(harsh <= mild + 1e-9);

    // A threshold no rollout reaches is a numerical failure, not a crash.
    let none = bats(&cfg, &["clone", "--threshold", "1e9"]);
    assert_eq!(none.status.code(), Some(4));
}
