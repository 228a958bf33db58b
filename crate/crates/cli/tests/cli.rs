use serde_json::Value;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_shiftscan");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = run(args, dir);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK: [&str; 4] = ["--b-bootstrap", "200", "--b-permutation", "200"];

fn synth_pair(dir: &Path) {
    std::fs::create_dir_all(dir.join("d")).unwrap();
    ok(
        &[
            "synth", "--kind", "conditional", "--subgroup", "1:0.5:3", "--patients", "1200",
            "--samples-per-period", "4", "--periods", "3", "--seed", "3", "--out", "d/a.jsonl",
        ],
        dir,
    );
    ok(&["synth", "--patients", "1200", "--samples-per-period", "4", "--seed", "4", "--out", "d/b.jsonl"], dir);
}

#[test]
fn scan_output_is_byte_identical_across_reruns_and_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_pair(dir);
    let scan = |out: &str, workers: &str| {
        let mut args = vec!["scan", "--data-dir", "d", "--out", out, "--seed", "42", "--workers", workers];
        args.extend(QUICK);
        ok(&args, dir);
        std::fs::read(dir.join(out)).unwrap()
    };
    let first = scan("r1.json", "1");
    assert_eq!(first, scan("r2.json", "1"));
    assert_eq!(first, scan("r3.json", "8"));
    let report: Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(report["config"]["seed"], 42);
    assert_eq!(report["results"].as_array().unwrap().len(), 6);
}

#[test]
fn test_on_null_scenario_reports_the_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["synth", "--patients", "1500", "--samples-per-period", "4", "--seed", "21", "--out", "null.jsonl"], dir);
    let mut args = vec!["test", "--data", "null.jsonl", "--period", "2019", "--out", "t.json", "--seed", "1"];
    args.extend(QUICK);
    let stdout = ok(&args, dir);
    let r = read_json(&dir.join("t.json"));
    assert_eq!(r["result"]["status"]["status"], "gated_out", "{stdout}");
    let gate = r["result"]["status"]["gate"].as_str().unwrap();
    assert!(!gate.is_empty());
    assert!(stdout.contains(&format!("gate={gate}")));
    assert_eq!(r["config"]["b_permutation"], 200);
}

#[test]
fn usage_and_data_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = run(&["scan", "--bogus"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let out = run(&["test", "--data", "missing.jsonl", "--period", "2019", "--out", "t.json"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.jsonl"));

    let out = run(&["scan", "--data-dir", ".", "--out", "r.json", "--config", "nope.json"], dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.json"));

    std::fs::write(dir.join("bad.jsonl"), "{\"patient_id\":\"p\",\"period\":1,\"month\":13,\"y\":0}\n").unwrap();
    let out = run(&["fit", "--data", "bad.jsonl", "--out-dir", "m"], dir);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("month"));

    assert_eq!(run(&["--help"], dir).status.code(), Some(0));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_pair(dir);
    std::fs::write(dir.join("c.json"), r#"{"alpha": 0.1, "seed": 5, "b_bootstrap": 100, "b_permutation": 100}"#).unwrap();
    ok(&["scan", "--config", "c.json", "--data-dir", "d", "--out", "r.json", "--seed", "9"], dir);
    let r = read_json(&dir.join("r.json"));
    assert_eq!(r["config"]["seed"], 9);
    assert_eq!(r["config"]["alpha"], 0.1);
    assert_eq!(r["alpha"], 0.1);

    let out = run(&["scan", "--data-dir", "d", "--out", "r.json", "--alpha", "1.5"], dir);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn split_fit_and_test_with_saved_models() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_pair(dir);
    let stdout = ok(&["split", "--data", "d/b.jsonl", "--out", "b.splits.jsonl", "--seed", "7"], dir);
    let counts: usize = stdout.lines().map(|l| l.split('\t').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(counts, 1200);
    let lines = std::fs::read_to_string(dir.join("b.splits.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 1200);

    ok(&["fit", "--data", "d/a.jsonl", "--out-dir", "m", "--seed", "3"], dir);
    for t in [2018, 2019, 2020] {
        assert!(dir.join(format!("m/model-{t}.json")).is_file());
    }
    assert_eq!(read_json(&dir.join("m/fit.meta.json"))["config"]["seed"], 3);
    let mut args = vec![
        "test", "--data", "d/a.jsonl", "--period", "2019", "--model-prev", "m/model-2018.json", "--model-curr",
        "m/model-2019.json", "--out", "t.json", "--dump-replicates", "reps.json",
    ];
    args.extend(QUICK);
    ok(&args, dir);
    let r = read_json(&dir.join("t.json"));
    assert_eq!(r["previous_period"], 2018);
    assert_eq!(r["result"]["key"]["scope"], "population");
    let reps = read_json(&dir.join("reps.json"));
    assert!(reps["bootstrap"].as_array().is_some_and(|b| !b.is_empty()));

    let out = run(&["test", "--data", "d/a.jsonl", "--period", "2019", "--model-prev", "m/model-2018.json", "--out", "t.json"], dir);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn report_exports_auc_series_and_loss_histogram() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_pair(dir);
    ok(
        &[
            "report", "--data", "d/a.jsonl", "--auc-series", "auc.tsv", "--loss-histogram", "loss.tsv", "--bins", "10",
            "--b-bootstrap", "50",
        ],
        dir,
    );
    let auc = std::fs::read_to_string(dir.join("auc.tsv")).unwrap();
    let rows: Vec<Vec<&str>> = auc.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows[0], ["period", "model", "training_period", "auc", "std_error", "n_samples"]);
    // the first period has only its own model
    assert_eq!(rows.len(), 1 + 1 + 2 * 2);
    for row in &rows[1..] {
        let auc: f64 = row[3].parse().unwrap();
        let se: f64 = row[4].parse().unwrap();
        assert!((0.0..=1.0).contains(&auc) && se > 0.0 && se < 0.1);
    }
    assert!(rows.iter().any(|r| r[..3] == ["2019", "previous", "2018"]));
    let loss = std::fs::read_to_string(dir.join("loss.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 2 * 10);
    assert_eq!(read_json(&dir.join("auc.tsv.meta.json"))["bins"], 10);

    let out = run(&["report", "--data", "d/a.jsonl"], dir);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_writes_findings_and_recalibration() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    synth_pair(dir);
    ok(
        &[
            "analyze", "--data", "d/a.jsonl", "--prev", "2018", "--curr", "2019", "--out", "a.json", "--findings",
            "f.tsv", "--skip-sign-flip", "--estimate-ratios", "f01", "--ratios-out", "ratios.json",
        ],
        dir,
    );
    let a = read_json(&dir.join("a.json"));
    assert_eq!(a["settings"]["current_period"], 2019);
    assert!(a["sign_flip"].is_null());
    let findings = std::fs::read_to_string(dir.join("f.tsv")).unwrap();
    assert!(findings.starts_with("feature_id\t"));

    ok(
        &[
            "analyze", "--data", "d/a.jsonl", "--out", "b.json", "--skip-sign-flip", "--ratios", "ratios.json",
            "--recalibrated", "rc.tsv",
        ],
        dir,
    );
    let b = read_json(&dir.join("b.json"));
    let rc = &b["recalibration"];
    let gap = |k: &str| (rc[k].as_f64().unwrap() - rc["observed_rate"].as_f64().unwrap()).abs();
    assert!(gap("mean_prediction_after") < gap("mean_prediction_before"), "{rc}");
    assert!(std::fs::read_to_string(dir.join("rc.tsv")).unwrap().starts_with("patient_id\t"));
}
