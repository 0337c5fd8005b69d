use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nulledit::harness::ExperimentConfig;
use nulledit::MethodKind;
use nulledit_cli::{canonical_config, parse_config_str, CliError, SWEEP_HEADER, TRACE_HEADER};
use tempfile::TempDir;

fn nulledit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nulledit"))
        .args(args)
        .env_remove("NULLEDIT_THREADS")
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn out_dir(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

fn manifest(dir: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(Path::new(dir).join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn empty_object_resolves_to_defaults() {
    let cfg = parse_config_str("{}", "inline").unwrap();
    assert_eq!(cfg, ExperimentConfig::default());
    assert_eq!(cfg.method.kind, MethodKind::BetaEdit);
    assert_eq!(cfg.dims.d_in, 64);
    assert_eq!(cfg.stream.num_edits, 100);
    assert_eq!(cfg.method.lambda2, 10.0);
    assert_eq!(cfg.method.epsilon, 0.02);
    assert_eq!(cfg.method.tau, 1000);
    assert_eq!(cfg.method.lambda1, 15000.0);
}

#[test]
fn negative_lambda2_names_field() {
    match parse_config_str(r#"{"method": {"lambda2": -1}}"#, "inline") {
        Err(CliError::Invalid { field, .. }) => assert_eq!(field, "method.lambda2"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn nested_unknown_key_is_rejected() {
    assert!(matches!(
        parse_config_str(r#"{"stream": {"seeds": 3}}"#, "inline"),
        Err(CliError::Parse { .. })
    ));
}

#[test]
fn serialize_parse_round_trip() {
    let inputs = [
        "{}",
        r#"{"method": {"kind": "alphaedit_h", "epsilon_fraction": 0.25, "rect_keep_ratio": 0.5}}"#,
        r#"{"stream": {"seed": 9, "conflict_mode": "independent", "collision_rate": 0.3}, "holdout": true}"#,
        r#"{"gram_normalize": "by_columns", "dims": {"d_in": 8, "d_out": 4, "n0": 3}}"#,
    ];
    for text in inputs {
        let a = parse_config_str(text, "inline").unwrap();
        let b = parse_config_str(&canonical_config(&a), "canonical").unwrap();
        assert_eq!(a, b, "{text}");
        assert_eq!(canonical_config(&a), canonical_config(&b));
    }
}

#[test]
fn run_writes_trace_rows_at_cadence() {
    let tmp = TempDir::new().unwrap();
    for (every, rows) in [(1, 10), (3, 4), (10, 1), (25, 1)] {
        let cfg = write(
            tmp.path(),
            &format!("c{every}.json"),
            &format!(r#"{{"stream": {{"num_edits": 10}}, "metrics_every": {every}}}"#),
        );
        let out = out_dir(tmp.path(), &format!("o{every}"));
        let res = nulledit(&["run", "--config", &cfg, "--out", &out]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
        let csv = fs::read_to_string(Path::new(&out).join("trace.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], TRACE_HEADER);
        assert_eq!(lines.len() - 1, rows, "metrics_every = {every}");
        assert!(lines.last().unwrap().starts_with("10,betaedit,"));
        let m = manifest(&out);
        assert_eq!(m["status"], "ok");
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
        assert!(m["started_at"].as_str().unwrap().ends_with('Z'));
    }
}

#[test]
fn floats_are_written_with_seventeen_digits() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"stream": {"num_edits": 5}, "metrics_every": 1, "method": {"kind": "memit"}}"#,
    );
    let out = out_dir(tmp.path(), "o");
    assert_eq!(nulledit(&["run", "--config", &cfg, "--out", &out]).status.code(), Some(0));
    let csv = fs::read_to_string(Path::new(&out).join("trace.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 8);
        for f in &fields[2..7] {
            let mantissa = f.split('e').next().unwrap().trim_start_matches('-');
            assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 17, "{f}");
        }
        assert!(fields[7] == "true" || fields[7] == "false");
    }
}

#[test]
fn identical_configs_give_identical_traces() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"stream": {"num_edits": 60, "collision_rate": 0.3}, "metrics_every": 7,
            "method": {"tau": 20, "lambda1": 100, "epsilon_fraction": 0.25}}"#,
    );
    let a = out_dir(tmp.path(), "a");
    let b = out_dir(tmp.path(), "b");
    assert_eq!(nulledit(&["run", "--config", &cfg, "--out", &a]).status.code(), Some(0));
    assert_eq!(nulledit(&["run", "--config", &cfg, "--out", &b]).status.code(), Some(0));
    let ta = fs::read(Path::new(&a).join("trace.csv")).unwrap();
    let tb = fs::read(Path::new(&b).join("trace.csv")).unwrap();
    assert_eq!(ta, tb);
    assert_eq!(manifest(&a)["config_hash"], manifest(&b)["config_hash"]);
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"stream": {"num_edits": 5}, "method": {"kind": "memit"}}"#);
    let a = out_dir(tmp.path(), "a");
    let b = out_dir(tmp.path(), "b");
    nulledit(&["run", "--config", &cfg, "--out", &a]);
    let res = nulledit(&["--seed", "11", "--metrics-every", "1", "run", "--config", &cfg, "--out", &b]);
    assert_eq!(res.status.code(), Some(0));
    assert_eq!(manifest(&b)["config"]["stream"]["seed"], 11);
    let csv = fs::read_to_string(Path::new(&b).join("trace.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert_ne!(manifest(&a)["final_weights_digest"], manifest(&b)["final_weights_digest"]);
}

#[test]
fn singular_update_aborts_with_exit_three() {
    // λ₁ = 0 leaves MEMIT with the rank-one system k·kᵀ.
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"stream": {"num_edits": 10}, "method": {"kind": "memit", "lambda1": 0}}"#,
    );
    let out = out_dir(tmp.path(), "o");
    let res = nulledit(&["run", "--config", &cfg, "--out", &out]);
    assert_eq!(res.status.code(), Some(3));
    let csv = fs::read_to_string(Path::new(&out).join("trace.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), format!("{TRACE_HEADER},aborted_at"));
    let m = manifest(&out);
    assert_eq!(m["status"], "aborted");
    assert_eq!(m["aborted_at"], 1);
}

#[test]
fn config_errors_exit_two_and_still_write_manifest() {
    let tmp = TempDir::new().unwrap();
    let bad = write(tmp.path(), "bad.json", r#"{"method": {"lambda2": -1}}"#);
    let broken = write(tmp.path(), "broken.json", "{\n  \"stream\": {\n    \"seed\": ,\n  }\n}");
    let o1 = out_dir(tmp.path(), "o1");
    let res = nulledit(&["run", "--config", &bad, "--out", &o1]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("method.lambda2"));
    assert_eq!(manifest(&o1)["status"], "config_error");

    let o2 = out_dir(tmp.path(), "o2");
    let res = nulledit(&["run", "--config", &broken, "--out", &o2]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("line 3 column"));

    let missing = out_dir(tmp.path(), "missing.json");
    assert_eq!(nulledit(&["run", "--config", &missing, "--out", &o2]).status.code(), Some(2));
}

#[test]
fn unknown_suite_exits_two() {
    let tmp = TempDir::new().unwrap();
    let out = out_dir(tmp.path(), "o");
    assert_eq!(nulledit(&["verify", "--suite", "nope", "--out", &out]).status.code(), Some(2));
}

#[test]
fn verify_oracle_and_projector_pass() {
    let tmp = TempDir::new().unwrap();
    for suite in ["oracle", "projector"] {
        let out = out_dir(tmp.path(), suite);
        let res = nulledit(&["verify", "--suite", suite, "--out", &out]);
        assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
        let rep: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(Path::new(&out).join(format!("verify_{suite}.json"))).unwrap())
                .unwrap();
        assert_eq!(rep["passed"], true);
        assert!(!rep["checks"].as_array().unwrap().is_empty());
    }
}

#[test]
fn theorem1_with_conflicting_stream_is_inconclusive_not_failed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"stream": {"num_edits": 20, "conflict_mode": "independent"},
            "method": {"lambda1": 100}, "dims": {"d_in": 16, "d_out": 8, "n0": 40}}"#,
    );
    let out = out_dir(tmp.path(), "o");
    let res = nulledit(&["verify", "--suite", "theorem1", "--out", &out, "--config", &cfg]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(&out).join("verify_theorem1.json")).unwrap()).unwrap();
    let seeds = rep["theorem1"]["seeds"].as_array().unwrap();
    assert_eq!(seeds.len(), 20);
    assert!(seeds.iter().any(|s| s["status"] == "inconclusive"));
    assert!(seeds.iter().all(|s| s["status"] != "fail"));
}

#[test]
fn sweep_rows_follow_input_order() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(
        tmp.path(),
        "c.json",
        r#"{"stream": {"num_edits": 30}, "method": {"lambda1": 100, "epsilon_fraction": 0.25}}"#,
    );
    let out = out_dir(tmp.path(), "o");
    let res = nulledit(&["sweep", "--config", &cfg, "--param", "tau", "--values", "100,10,T", "--out", &out]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let csv = fs::read_to_string(Path::new(&out).join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    let values: Vec<f64> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(values, vec![100.0, 10.0, 30.0]);
    for i in 0..3 {
        assert!(Path::new(&out).join(format!("trace_{i:03}.csv")).exists());
    }
}

#[test]
fn single_value_sweep_has_one_row_and_respects_thread_cap() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", r#"{"stream": {"num_edits": 10}}"#);
    let out = out_dir(tmp.path(), "o");
    let res = Command::new(env!("CARGO_BIN_EXE_nulledit"))
        .args(["sweep", "--config", &cfg, "--param", "lambda1", "--values", "500", "--out", &out])
        .env("NULLEDIT_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(0));
    let csv = fs::read_to_string(Path::new(&out).join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);

    let res = Command::new(env!("CARGO_BIN_EXE_nulledit"))
        .args(["sweep", "--config", &cfg, "--param", "lambda1", "--values", "500", "--out", &out])
        .env("NULLEDIT_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn unknown_sweep_parameter_exits_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(tmp.path(), "c.json", "{}");
    let out = out_dir(tmp.path(), "o");
    let res = nulledit(&["sweep", "--config", &cfg, "--param", "lambda9", "--values", "1", "--out", &out]);
    assert_eq!(res.status.code(), Some(2));
}
