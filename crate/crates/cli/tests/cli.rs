use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn hetsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetsel"))
        .args(args)
        .current_dir(workspace())
        .env("RUST_LOG", "warn")
        .env_remove("HETSEL_LLM_API_KEY")
        .output()
        .expect("binary runs")
}

fn toy_args<'a>(command: &'a str, out: &'a str) -> Vec<&'a str> {
    vec![command, "--config", "crates/core/tests/data/toy/run.json", "--out", out, "--log", "warn"]
}

#[test]
fn report_without_runs_is_a_usage_error() {
    let out = hetsel(&["report"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hetsel(&["run", "--manifest", "no/such/manifest.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn llm_mode_without_key_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = toy_args("run", dir.path().to_str().unwrap());
    args.extend(["--mode", "semantic-llm", "--llm-endpoint", "http://127.0.0.1:9/unused"]);
    let out = hetsel(&args);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("HETSEL_LLM_API_KEY"));
}

#[test]
fn stages_match_a_full_run() {
    let staged = tempfile::tempdir().unwrap();
    let full = tempfile::tempdir().unwrap();
    let s = staged.path().to_str().unwrap();
    for stage in ["ingest", "stats", "semantic", "graph", "train", "select", "eval"] {
        let mut args = toy_args(stage, s);
        args.extend(["--mode", "semantic-mock"]);
        let out = hetsel(&args);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let mut args = toy_args("run", full.path().to_str().unwrap());
    args.extend(["--mode", "semantic-mock"]);
    let out = hetsel(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["feature_scores.csv", "selections.csv", "semantic_scores.json", "eval/ours-semantic-mock.csv"] {
        let a = std::fs::read_to_string(staged.path().join(name)).unwrap();
        let b = std::fs::read_to_string(full.path().join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }

    let report_dir = tempfile::tempdir().unwrap();
    let out = hetsel(&["report", s, "--out", report_dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(report_dir.path().join("lrap.svg").exists());
}
