//! Binary-level contract tests: artifact formats, exit codes, and the table
//! cache, driven through the installed `hasmm` executable.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hasmm"))
}

fn params_json() -> &'static str {
    r#"{
      "n_states": 3,
      "sojourn": [
        {"shape": 1.5, "rate": 0.5},
        {"shape": 2.0, "rate": 0.4},
        {"shape": 1.5, "rate": 0.5}
      ],
      "initial": [0.0, 1.0, 0.0],
      "eta": [[0.0, 0.0, 0.0], [0.3, 0.0, -0.3], [0.0, 0.0, 0.0]],
      "beta": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]],
      "emission": [
        {"mean": [-2.0], "sigma": 0.6, "length_scale": 0.5, "task_cov": [[1.0]]},
        {"mean": [0.0], "sigma": 0.6, "length_scale": 0.5, "task_cov": [[1.0]]},
        {"mean": [2.0], "sigma": 0.6, "length_scale": 0.5, "task_cov": [[1.0]]}
      ],
      "zeta": 0.8
    }"#
}

fn write_params(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("params.json");
    fs::write(&path, params_json()).unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr_error(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|e| panic!("stderr not error JSON ({e}): {text}"))
}

#[test]
fn pipeline_artifacts_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let episodes = dir.path().join("episodes.jsonl");
    run(bin()
        .args(["generate", "--count", "12", "--seed", "3", "--deterministic"])
        .arg("--params")
        .arg(&params)
        .arg("--out")
        .arg(&episodes));
    let text = fs::read_to_string(&episodes).unwrap();
    let mut lines = text.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["_provenance"]["timestamp_unix"], 0);
    assert_eq!(header["_provenance"]["seed"], 3);
    assert_eq!(lines.count(), 12);

    let table = dir.path().join("table.bin");
    let out = run(bin()
        .args(["build-table", "--grid-dt", "1.0"])
        .arg("--params")
        .arg(&params)
        .arg("--out")
        .arg(&table));
    let diag: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stdout).trim()).unwrap();
    assert_eq!(diag["plateau_ok"], true);

    let snaps = dir.path().join("snaps.jsonl");
    run(bin()
        .args(["filter", "--deterministic"])
        .arg("--params")
        .arg(&params)
        .arg("--episodes")
        .arg(&episodes)
        .arg("--table")
        .arg(&table)
        .arg("--out")
        .arg(&snaps));
    for line in fs::read_to_string(&snaps).unwrap().lines().skip(1) {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let posterior: Vec<f64> =
            v["posterior"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        let total: f64 = posterior.iter().sum();
        assert!((total - 1.0).abs() < 1e-9, "posterior sums to {total}");
        let map_state = v["map_state"].as_u64().unwrap();
        assert!((1..=3).contains(&map_state), "map_state {map_state} is 1-based");
        let risk = v["risk"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&risk));
    }

    let scored = dir.path().join("scored.jsonl");
    run(bin()
        .args(["score", "--deterministic"])
        .arg("--params")
        .arg(&params)
        .arg("--episodes")
        .arg(&episodes)
        .arg("--table")
        .arg(&table)
        .arg("--out")
        .arg(&scored));

    let summary = dir.path().join("summary.json");
    run(bin()
        .args(["evaluate", "--deterministic", "--threshold-sweep", "0:1:21"])
        .arg("--scores")
        .arg(&scored)
        .arg("--out")
        .arg(&summary));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    assert!(summary["auc"].as_f64().unwrap() > 0.0);
    let curve = fs::read_to_string(dir.path().join("summary.curve.csv")).unwrap();
    let header_line = curve.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header_line, "threshold,tpr,ppv");

    let fitted = dir.path().join("fitted.json");
    run(bin()
        .args([
            "learn",
            "--seed",
            "5",
            "--n-states",
            "3",
            "--mc-samples",
            "6",
            "--max-iter",
            "2",
            "--grid-dt",
            "1.0",
            "--deterministic",
        ])
        .arg("--episodes")
        .arg(&episodes)
        .arg("--out")
        .arg(&fitted));
    let trace = fs::read_to_string(dir.path().join("fitted.trace.csv")).unwrap();
    let header_line = trace.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header_line, "iter,q_hat,est_loglik,min_ess,wall_time_s");
    for line in trace.lines().filter(|l| !l.starts_with('#')).skip(1) {
        assert!(line.ends_with(",0"), "wall time must be zeroed: {line}");
    }

    // The fitted file round-trips as a parameter input.
    let two = dir.path().join("two.jsonl");
    run(bin()
        .args(["generate", "--count", "2", "--seed", "9", "--deterministic"])
        .arg("--params")
        .arg(&fitted)
        .arg("--out")
        .arg(&two));
}

#[test]
fn exit_codes_follow_the_documented_contract() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());

    // Usage errors are clap's exit code 2.
    let out = bin().args(["generate", "--nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Malformed input files are code 3 with a structured report.
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, "{\"not\": \"an episode\"}\n").unwrap();
    let out = bin()
        .args(["filter", "--grid-dt", "1.0"])
        .arg("--params")
        .arg(&params)
        .arg("--episodes")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let err = stderr_error(&out);
    assert_eq!(err["error"]["code"], 3);
    assert_eq!(err["error"]["kind"], "malformed_file");

    // A table built for different parameters is code 4.
    let mut other: serde_json::Value = serde_json::from_str(params_json()).unwrap();
    other["zeta"] = serde_json::json!(1.9);
    let other_params = dir.path().join("other.json");
    fs::write(&other_params, other.to_string()).unwrap();
    let other_table = dir.path().join("other.bin");
    run(bin()
        .args(["build-table", "--grid-dt", "1.0"])
        .arg("--params")
        .arg(&other_params)
        .arg("--out")
        .arg(&other_table));
    let episodes = dir.path().join("episodes.jsonl");
    run(bin()
        .args(["generate", "--count", "3", "--seed", "1", "--deterministic"])
        .arg("--params")
        .arg(&params)
        .arg("--out")
        .arg(&episodes));
    let out = bin()
        .arg("filter")
        .arg("--params")
        .arg(&params)
        .arg("--episodes")
        .arg(&episodes)
        .arg("--table")
        .arg(&other_table)
        .arg("--out")
        .arg(dir.path().join("y.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(stderr_error(&out)["error"]["kind"], "fingerprint_mismatch");
}

#[test]
fn score_builds_and_reuses_a_table_cache() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let episodes = dir.path().join("episodes.jsonl");
    run(bin()
        .args(["generate", "--count", "6", "--seed", "2", "--deterministic"])
        .arg("--params")
        .arg(&params)
        .arg("--out")
        .arg(&episodes));

    let cache = dir.path().join("params.table.bin");
    assert!(!cache.exists());
    let first = dir.path().join("a.jsonl");
    run(bin()
        .args(["score", "--grid-dt", "1.0", "--deterministic"])
        .arg("--params")
        .arg(&params)
        .arg("--episodes")
        .arg(&episodes)
        .arg("--out")
        .arg(&first));
    assert!(cache.exists(), "score caches the table beside the parameter file");

    // A stale cache is rebuilt in place and the results are unaffected.
    let mut other: serde_json::Value = serde_json::from_str(params_json()).unwrap();
    other["zeta"] = serde_json::json!(1.9);
    let other_params = dir.path().join("other.json");
    fs::write(&other_params, other.to_string()).unwrap();
    run(bin()
        .args(["build-table", "--grid-dt", "1.0"])
        .arg("--params")
        .arg(&other_params)
        .arg("--out")
        .arg(&cache));
    let second = dir.path().join("b.jsonl");
    run(bin()
        .args(["score", "--grid-dt", "1.0", "--deterministic"])
        .arg("--params")
        .arg(&params)
        .arg("--episodes")
        .arg(&episodes)
        .arg("--out")
        .arg(&second));
    assert_eq!(
        fs::read(&first).unwrap(),
        fs::read(&second).unwrap(),
        "rebuilt cache changes nothing"
    );
}
