use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vcsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vcsim"))
        .args(args)
        .env_remove("SIM_SEED")
        .output()
        .expect("binary runs")
}

fn scenario(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect();
    p.to_string_lossy().into_owned()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn list_strategies_prints_nine() {
    let out = vcsim(&["list-strategies"]);
    assert!(out.status.success());
    let stdout = text(&out.stdout);
    assert_eq!(stdout.lines().count(), 9);
    assert!(stdout.contains("SERVER SINGLE_ONLINE HASH_LB"));
}

#[test]
fn run_emits_report_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.trace");
    let out = vcsim(&["run", "--scenario", &scenario("fig5_bounce.json"), "--trace", trace.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["bounce_count"].as_u64().unwrap() >= 1);
    let lines = std::fs::read_to_string(&trace).unwrap();
    assert!(lines.lines().all(|l| l.split('\t').count() == 5));
}

#[test]
fn seed_flag_beats_env_and_env_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenario("fig6_rollout.json");
    let run = |seed: Option<&str>, env: Option<&str>, out: &str| {
        let out_path = dir.path().join(out);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_vcsim"));
        cmd.args(["run", "--scenario", &path, "--out", out_path.to_str().unwrap()]);
        if let Some(s) = seed {
            cmd.args(["--seed", s]);
        }
        match env {
            Some(e) => cmd.env("SIM_SEED", e),
            None => cmd.env_remove("SIM_SEED"),
        };
        assert!(cmd.status().unwrap().success());
        std::fs::read_to_string(out_path).unwrap()
    };
    let file_seed = run(None, None, "a.json");
    let env_seed = run(None, Some("41"), "b.json");
    let flag = run(Some("41"), Some("7"), "c.json");
    let flag_only = run(Some("41"), None, "d.json");
    assert_eq!(env_seed, flag);
    assert_eq!(flag, flag_only);
    assert_ne!(file_seed, env_seed);
}

#[test]
fn bad_env_seed_is_an_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_vcsim"))
        .args(["run", "--scenario", &scenario("fig5_bounce.json")])
        .env("SIM_SEED", "nope")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("SIM_SEED"));
}

#[test]
fn validate_reports_parse_and_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ok = vcsim(&["validate", "--scenario", &scenario("device_update.json")]);
    assert!(ok.status.success());
    assert!(text(&ok.stdout).starts_with("ok:"));

    let broken = write(dir.path(), "broken.json", "{\n  \"users\": ,\n}");
    let out = vcsim(&["validate", "--scenario", &broken]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("PARSE_ERROR at line 2"), "{}", text(&out.stderr));

    let invalid = write(dir.path(), "invalid.json", r#"{"users": 0}"#);
    let out = vcsim(&["validate", "--scenario", &invalid]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("VALIDATION_ERROR"), "{}", text(&out.stderr));
}

#[test]
fn compare_writes_one_row_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("cmp.json");
    let inputs = [scenario("fig5_bounce.json"), scenario("fig6_rollout.json")];
    let out = vcsim(&["compare", "--scenario", &inputs[0], &inputs[1], "--out", out_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let table = text(&out.stdout);
    assert!(table.contains("fig5_bounce") && table.contains("fig6_rollout"));
    let rows: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out_path).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["error"].is_null()));
}

#[test]
fn missing_file_exits_one() {
    let out = vcsim(&["run", "--scenario", "/nonexistent/x.json"]);
    assert_eq!(out.status.code(), Some(1));
}
