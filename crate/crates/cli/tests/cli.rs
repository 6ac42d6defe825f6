//! End-to-end tests of the command-line driver: every command is exercised
//! through the real binary against temp directories, checking exit codes,
//! file outputs, bitwise replayability, and the failure-report contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_heavyica"))
}

fn write_cfg(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).expect("config written");
    path
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Run a command that must fail and hand back its parsed failure report.
fn run_err(cmd: &mut Command) -> serde_json::Value {
    let out = cmd.output().expect("binary runs");
    assert!(
        !out.status.success(),
        "command unexpectedly succeeded\nstdout: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.trim_start().starts_with('{'))
        .unwrap_or_else(|| panic!("no JSON failure report on stderr: {stderr}"));
    serde_json::from_str(line).expect("failure report parses")
}

fn read_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

fn read_report(dir: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join("report.json")).expect("report exists");
    serde_json::from_str(&text).expect("report parses")
}

const UNIFORM_PAIR: &str = r#"[
        {"family": "uniform", "normalize": true},
        {"family": "uniform", "normalize": true}
    ]"#;

/// Small instance with a real walk: enough samples for the oracle to behave,
/// few enough that the whole command finishes in seconds.
fn walk_config() -> String {
    format!(
        r#"{{
    "model": {{"kind": "random_cond", "cond": 2.0}},
    "sources": {UNIFORM_PAIR},
    "n_samples": 4000,
    "n_freeze": 1000,
    "walk_points": 150,
    "walk": {{
        "burn_in": 60, "thinning": 1, "chains": 1, "max_stuck": 50,
        "edge_trim": 0.01, "chord_tol": 0.005, "seed": 0
    }},
    "seed": 11
}}"#
    )
}

#[test]
fn generate_replays_bitwise_and_respects_the_overwrite_guard() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        &format!(
            r#"{{
    "model": {{"kind": "random_cond", "cond": 2.0}},
    "sources": {UNIFORM_PAIR},
    "n_samples": 2000,
    "seed": 7
}}"#
        ),
    );
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    run_ok(
        bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_a),
    );
    run_ok(
        bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_b),
    );

    // Same config, same seed: identical bytes in both outputs.
    assert_eq!(
        read_bytes(&out_a.join("data.csv")),
        read_bytes(&out_b.join("data.csv")),
        "replayed data.csv differs"
    );
    assert_eq!(
        read_bytes(&out_a.join("model.json")),
        read_bytes(&out_b.join("model.json")),
        "replayed model.json differs"
    );

    // A different root seed must change the data.
    let out_c = tmp.path().join("c");
    run_ok(
        bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_c)
            .args(["--seed", "99"]),
    );
    assert_ne!(
        read_bytes(&out_a.join("data.csv")),
        read_bytes(&out_c.join("data.csv")),
        "seed override had no effect"
    );

    // Existing outputs are refused without --force and replaced with it.
    let failure = run_err(
        bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_a),
    );
    assert_eq!(failure["error_kind"], "config");
    assert!(
        failure["message"].as_str().unwrap().contains("--force"),
        "guard message should name the flag: {failure}"
    );
    run_ok(
        bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_a)
            .arg("--force"),
    );
}

#[test]
fn orthogonalize_replays_bitwise_and_reports_the_sample_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), &walk_config());
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    run_ok(
        bin()
            .args(["orthogonalize", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_a),
    );
    run_ok(
        bin()
            .args(["orthogonalize", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out_b),
    );

    assert_eq!(
        read_bytes(&out_a.join("orthogonalized.csv")),
        read_bytes(&out_b.join("orthogonalized.csv")),
        "replayed orthogonalized.csv differs"
    );
    assert_eq!(
        read_bytes(&out_a.join("report.json")),
        read_bytes(&out_b.join("report.json")),
        "replayed report.json differs"
    );

    let report = read_report(&out_a);
    assert_eq!(report["dim"], 2);
    let b = report["b"].as_array().expect("map B present");
    assert_eq!(b.len(), 2);
    assert!(report["oracle_queries"].as_u64().unwrap() > 0);
    // 1000 frozen rows cannot meet the worst-case support-accuracy bound,
    // so the run must say so rather than silently proceed.
    assert!(
        report["sample_budget_warning"].is_string(),
        "expected a sample budget warning: {report}"
    );
}

#[test]
fn pipeline_refuses_momentless_sources_without_a_unitary_claim() {
    let tmp = tempfile::tempdir().unwrap();

    // A general mixing cannot be recovered at all without first moments: the
    // model itself is rejected.
    let cfg = write_cfg(
        tmp.path(),
        r#"{
    "model": {"kind": "random_cond", "cond": 3.0},
    "sources": [
        {"family": "cauchy", "alpha": 1.0},
        {"family": "cauchy", "alpha": 1.0}
    ],
    "n_samples": 1000,
    "seed": 3
}"#,
    );
    let out = tmp.path().join("out");
    let failure = run_err(
        bin()
            .args(["pipeline", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(failure["stage"], "pipeline");
    assert_eq!(failure["error_kind"], "config");
    assert!(
        failure["message"].as_str().unwrap().contains("unitary"),
        "rejection should say the mixing must be unitary: {failure}"
    );
    assert!(!out.join("report.json").exists(), "no report on failure");

    // A unitary model still needs the explicit claim before the walk-free
    // path is taken.
    let cfg2 = tmp.path().join("config2.json");
    std::fs::write(
        &cfg2,
        r#"{
    "model": {"kind": "unitary_random"},
    "sources": [
        {"family": "cauchy", "alpha": 1.0},
        {"family": "cauchy", "alpha": 1.0}
    ],
    "n_samples": 1000,
    "seed": 3
}"#,
    )
    .unwrap();
    let failure = run_err(
        bin()
            .args(["pipeline", "--config"])
            .arg(&cfg2)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(failure["error_kind"], "config");
    assert!(
        failure["message"]
            .as_str()
            .unwrap()
            .contains("assume_unitary"),
        "rejection should point at the damping-only path: {failure}"
    );
}

#[test]
fn damp_then_recover_chain_scores_against_the_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        &format!(
            r#"{{
    "model": {{"kind": "identity"}},
    "sources": {UNIFORM_PAIR},
    "n_samples": 30000,
    "seed": 21
}}"#
        ),
    );
    let gen = tmp.path().join("gen");
    run_ok(
        bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&gen),
    );
    let data = gen.join("data.csv");
    let model = gen.join("model.json");

    let damped = tmp.path().join("damped");
    run_ok(
        bin()
            .args(["damp", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&damped)
            .arg("--data")
            .arg(&data)
            .arg("--model")
            .arg(&model),
    );
    let damp_report = read_report(&damped);
    let rate = damp_report["acceptance_rate"].as_f64().unwrap();
    assert!(
        rate > 0.0 && rate < 1.0,
        "acceptance rate {rate} out of range"
    );
    assert!(damp_report["accepted"].as_u64().unwrap() >= 256);
    assert_eq!(
        damp_report["bound_check"]["ok"], true,
        "damped fourth moment exceeded its bound: {}",
        damp_report["bound_check"]
    );

    let recovered = tmp.path().join("recovered");
    run_ok(
        bin()
            .args(["recover", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&recovered)
            .arg("--data")
            .arg(damped.join("damped.csv"))
            .arg("--model")
            .arg(&model),
    );
    let rec_report = read_report(&recovered);
    let v = rec_report["v"].as_array().expect("V present");
    assert_eq!(v.len(), 2);
    let max_error = rec_report["match_score"]["max_error"].as_f64().unwrap();
    assert!(
        max_error < 0.5,
        "recovered basis strayed from an identity mixing: max column error {max_error}"
    );
}

#[test]
fn full_pipeline_writes_stage_files_and_a_scored_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg_text: serde_json::Value = serde_json::from_str(&walk_config()).unwrap();
    cfg_text["n_samples"] = 20000.into();
    cfg_text["n_freeze"] = 2000.into();
    cfg_text["walk_points"] = 200.into();
    cfg_text["keep_stages"] = true.into();
    let cfg = write_cfg(tmp.path(), &cfg_text.to_string());

    let out = tmp.path().join("out");
    run_ok(
        bin()
            .args(["pipeline", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out),
    );

    for stage in ["symmetrized.csv", "orthogonalized.csv", "damped.csv"] {
        assert!(out.join(stage).exists(), "missing stage file {stage}");
    }
    let report = read_report(&out);
    assert!(
        report["orthogonalizer"].is_object(),
        "orthogonalizer block missing"
    );
    assert!(report["damping"].is_object(), "damping block missing");
    assert!(report["recovery"].is_object(), "recovery block missing");
    assert!(report["match_score"].is_object(), "score block missing");
    assert!(report["b_mix"].as_array().unwrap().len() == 2);
}

#[test]
fn evaluate_scores_a_model_against_itself_as_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        tmp.path(),
        &format!(
            r#"{{
    "model": {{"kind": "identity"}},
    "sources": {UNIFORM_PAIR},
    "n_samples": 100,
    "seed": 5
}}"#
        ),
    );
    let gen = tmp.path().join("gen");
    run_ok(
        bin()
            .args(["generate", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&gen),
    );
    let model = gen.join("model.json");

    let out = run_ok(
        bin()
            .args(["evaluate", "--estimate"])
            .arg(&model)
            .arg("--truth")
            .arg(&model),
    );
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("evaluate prints a JSON report");
    let score = &report["match_score"];
    assert_eq!(score["max_error"].as_f64().unwrap(), 0.0);
    assert!(score["amari_index"].as_f64().unwrap() < 1e-12);
    assert_eq!(score["assignment"], serde_json::json!([0, 1]));
}
