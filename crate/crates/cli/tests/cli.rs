use std::path::Path;
use std::process::{Command, Output};

fn widesearch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_widesearch"))
        .current_dir(dir)
        .env_remove("WIDESEARCH_FIXTURE_PATH")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = widesearch(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn cas_matches_reported_value() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ok(dir.path(), &["cas", "--acc", "0.191", "--tok", "2.6", "--tool", "1.71"]).trim(), "0.520");
}

#[test]
fn exit_codes_separate_usage_from_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(widesearch(d, &["--help"]).status.code(), Some(0));
    assert_eq!(widesearch(d, &["no-such-command"]).status.code(), Some(2));
    assert_eq!(widesearch(d, &["cas", "--acc", "1.5", "--tok", "1", "--tool", "1"]).status.code(), Some(3));

    std::fs::write(d.join("broken.jsonl"), "{\"kind\":\"edge\",\"subject\":\"nobody\"}\n").unwrap();
    assert_eq!(widesearch(d, &["world-check", "--world", "broken.jsonl"]).status.code(), Some(3));
    assert_eq!(widesearch(d, &["world-check", "--world", "missing"]).status.code(), Some(3));

    ok(d, &["synth-mosaic", "--n", "3", "--out", "m.jsonl"]);
    let bad_policy = widesearch(d, &["rollout", "--qa", "m.jsonl", "--policy", "wizard", "--out", "r.jsonl"]);
    assert_eq!(bad_policy.status.code(), Some(2));
    std::fs::write(d.join("bad.toml"), "[env]\nmax_turns = 0\n").unwrap();
    let bad_config = widesearch(d, &["--config", "bad.toml", "rollout", "--qa", "m.jsonl", "--out", "r.jsonl"]);
    assert_eq!(bad_config.status.code(), Some(3));
}

#[test]
fn fixture_names_resolve_through_search_path() {
    let dir = tempfile::tempdir().unwrap();
    let fixtures = dir.path().join("fixtures");
    std::fs::create_dir(&fixtures).unwrap();
    std::fs::write(fixtures.join("copy.jsonl"), widesearch::world::demo_world_jsonl()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_widesearch"))
        .current_dir(dir.path())
        .env("WIDESEARCH_FIXTURE_PATH", &fixtures)
        .args(["world-check", "--world", "copy"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(out.stdout, ok(dir.path(), &["world-check"]).into_bytes());
}

#[test]
fn curation_pipeline_writes_outputs_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "3", "synth-mosaic", "--n", "12", "--out", "m.jsonl"]);
    ok(d, &["--seed", "3", "curate-prs", "--qa", "m.jsonl", "--budgets", "4,8", "--k", "2", "--out", "prs.jsonl"]);
    ok(d, &["--seed", "3", "select-rl", "--qa", "m.jsonl", "--out", "rl.jsonl"]);
    ok(d, &["--seed", "3", "train-sim", "--qa", "m.jsonl", "--rl", "rl.jsonl", "--epochs", "2", "--out", "train.json"]);
    ok(d, &["--seed", "3", "eval-bench", "--qa", "m.jsonl", "--out", "bench.json", "--csv", "bench.csv"]);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("prs.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "curate-prs");
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config"]["curation"]["budgets"], serde_json::json!([4, 8]));
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);

    let text = std::fs::read_to_string(d.join("prs.jsonl")).unwrap();
    for line in text.lines() {
        let t: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(t["t_c"].as_u64().unwrap() >= 1);
    }

    let report = ok(d, &["report", "--input", "bench.json", "--format", "csv"]);
    assert_eq!(report, std::fs::read_to_string(d.join("bench.csv")).unwrap());
    assert!(ok(d, &["report", "--input", "train.json"]).contains("mean_reward"));
}

#[test]
fn same_seed_gives_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(d, &["--seed", "11", "synth-mosaic", "--n", "8", "--out", "m.jsonl"]);
        ok(d, &["--seed", "11", "--jobs", "2", "rollout", "--qa", "m.jsonl", "--policy", "stochastic:0.5", "--group", "3", "--out", "r.jsonl"]);
        ok(d, &["--seed", "11", "eval-robustness", "--qa", "m.jsonl", "--k", "1,3", "--shuffles", "4", "--out", "rob.json"]);
    }
    for f in ["m.jsonl", "r.jsonl", "r.jsonl.manifest.json", "rob.json"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
