use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_qrm-edge");

fn qrm(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("QRM_EDGE_CONFIG")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, capacity_wh: f64) -> String {
    let text = qrm_edge::config::BUILTIN_CONFIG.replace("capacity_wh = 47.7", &format!("capacity_wh = {capacity_wh}"));
    let path = dir.join("small.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn evaluate_against_itself_has_zero_extension() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_str().unwrap();
    let o = qrm(&["evaluate", "scenario1", "--baseline", "scenario1", "--out", out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&tmp.path().join("scenarios.csv"));
    assert_eq!(
        rows[0],
        ["scenario", "total_seconds", "display_time", "weighted_f1", "reconfig_count", "extension_pct", "f1_delta"]
    );
    assert_eq!(rows[1], ["scenario1", "36000.000", "10h 00'", "78.14", "0", "0.00", "0.00"]);
}

#[test]
fn evaluate_mixed_policy_extension() {
    let tmp = tempfile::tempdir().unwrap();
    let o = qrm(&["evaluate", "scenario7", "--baseline", "scenario1", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success());
    let rows = csv_rows(&tmp.path().join("scenarios.csv"));
    let ext: f64 = rows[1][5].parse().unwrap();
    // closed form: 0.5/4.77 + 0.25/4.43 + 0.25/2.61 of the 10 h single-mode time
    let expected = 100.0 * (4.77 * (0.5 / 4.77 + 0.25 / 4.43 + 0.25 / 2.61) - 1.0);
    assert!((ext - expected).abs() < 0.01, "{ext} vs {expected}");
    assert_eq!(rows[1][2], "12h 16'");
    assert_eq!(rows[1][4], "2");
    let ndjson = fs::read_to_string(tmp.path().join("scenarios.ndjson")).unwrap();
    let v: serde_json::Value = serde_json::from_str(ndjson.lines().next().unwrap()).unwrap();
    assert_eq!(v["policy"], "scenario7");
}

#[test]
fn evaluate_is_repeatable() {
    let a = qrm(&["evaluate", "--all", "--out", tempfile::tempdir().unwrap().path().to_str().unwrap()]);
    let b = qrm(&["evaluate", "--all", "--out", tempfile::tempdir().unwrap().path().to_str().unwrap()]);
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a).lines().count(), 8);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let o = qrm(&["evaluate", "no-such-policy"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown policy `no-such-policy`"));

    assert_eq!(qrm(&["evaluate"]).status.code(), Some(2));
    assert_eq!(qrm(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(qrm(&["--config", "/nonexistent/qrm.toml", "evaluate", "--all"]).status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "capacity_wh = 47.7\nmystery = 1\n").unwrap();
    let o = qrm(&["--config", bad.to_str().unwrap(), "evaluate", "--all"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn help_exits_0() {
    let o = qrm(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["evaluate", "simulate", "metrics", "report"] {
        assert!(stdout(&o).contains(sub));
    }
}

#[test]
fn config_path_falls_back_to_env() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 4.77);
    let o = Command::new(BIN)
        .args(["evaluate", "scenario1", "--out", tmp.path().to_str().unwrap()])
        .env("QRM_EDGE_CONFIG", &cfg)
        .output()
        .unwrap();
    assert!(o.status.success());
    let rows = csv_rows(&tmp.path().join("scenarios.csv"));
    // 4.77 Wh at 4.77 W lasts one hour
    assert_eq!(rows[1][1], "3600.000");
}

fn write_predictions(path: &Path, records: &[(usize, Vec<f64>)]) {
    let text: String = records
        .iter()
        .map(|(t, c)| serde_json::json!({"true": t, "confidences": c}).to_string() + "\n")
        .collect();
    fs::write(path, text).unwrap();
}

fn metric(out: &str, name: &str) -> f64 {
    out.lines()
        .find(|l| l.starts_with(name))
        .and_then(|l| l.split_whitespace().last())
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn metrics_hand_example() {
    // rows [[8, 2], [2, 3]]
    let mut records = Vec::new();
    records.extend((0..8).map(|_| (0, vec![0.9, 0.1])));
    records.extend((0..2).map(|_| (0, vec![0.3, 0.7])));
    records.extend((0..2).map(|_| (1, vec![0.6, 0.4])));
    records.extend((0..3).map(|_| (1, vec![0.2, 0.8])));
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("p.ndjson");
    write_predictions(&file, &records);
    let o = qrm(&["metrics", file.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    // class 0: P = R = 0.8; class 1: P = R = 0.6
    assert!((metric(&out, "macro F1") - 0.7).abs() < 1e-6);
    assert!((metric(&out, "accuracy") - 11.0 / 15.0).abs() < 1e-6);
    let rows = csv_rows(&tmp.path().join("pr_curve.csv"));
    assert_eq!(rows[0], ["class", "recall", "precision"]);
    assert_eq!(rows.len(), 1 + 3 * 101);
    assert!(tmp.path().join("metrics.json").exists());
}

#[test]
fn metrics_perfect_predictions() {
    let records: Vec<_> = (0..30).map(|i| (i % 3, (0..3).map(|c| if c == i % 3 { 0.9 } else { 0.05 }).collect())).collect();
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("p.ndjson");
    write_predictions(&file, &records);
    let o = qrm(&["metrics", file.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    let out = stdout(&o);
    for name in ["accuracy", "macro precision", "macro recall", "macro F1", "macro AUC"] {
        assert_eq!(metric(&out, name), 1.0, "{name}");
    }
}

#[test]
fn metrics_reports_bad_line_number() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("p.ndjson");
    fs::write(&file, "{\"true\":0,\"confidences\":[0.6,0.4]}\n\n{\"true\":1,\"confidences\":[0.6,0.4],\"extra\":1}\n").unwrap();
    let o = qrm(&["metrics", file.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("p.ndjson:3:"), "{}", stderr(&o));

    fs::write(&file, "{\"true\":0,\"confidences\":[0.6,0.4]}\n{\"true\":2,\"confidences\":[0.6,0.4]}\n").unwrap();
    let o = qrm(&["metrics", file.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(":2:"));
}

#[test]
fn simulate_then_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 0.4);
    let sim_dir = tmp.path().join("sim");
    let o = qrm(&["--config", &cfg, "simulate", "--policy", "scenario7", "--out", sim_dir.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["monitoring.ndjson", "summary.txt", "histogram.csv", "timeline.csv", "predictions.ndjson"] {
        assert!(sim_dir.join(f).exists(), "{f}");
    }
    let timeline = csv_rows(&sim_dir.join("timeline.csv"));
    assert_eq!(timeline[0], ["node", "segment", "mode", "start_s", "end_s"]);
    assert_eq!(timeline.len(), 4, "three mode segments");
    assert_eq!(csv_rows(&sim_dir.join("histogram.csv"))[0], ["node", "label", "total_seconds"]);

    let report_dir = tmp.path().join("rep");
    let log = sim_dir.join("monitoring.ndjson");
    let r = qrm(&["--config", &cfg, "report", log.to_str().unwrap(), "--out", report_dir.to_str().unwrap()]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert_eq!(stdout(&r), stdout(&o));
    assert_eq!(
        fs::read(report_dir.join("timeline.csv")).unwrap(),
        fs::read(sim_dir.join("timeline.csv")).unwrap()
    );

    // the predictions feed straight into `metrics`
    let preds = sim_dir.join("predictions.ndjson");
    let m = qrm(&["metrics", preds.to_str().unwrap(), "--out", tmp.path().join("m").to_str().unwrap()]);
    assert!(m.status.success(), "{}", stderr(&m));
}

#[test]
fn report_rejects_corrupt_log() {
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("log.ndjson");
    fs::write(&log, "{\"seq\":0}\n").unwrap();
    assert_eq!(qrm(&["report", log.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn simulate_port_in_use_is_a_runtime_failure() {
    let taken = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let port = taken.local_addr().unwrap().port().to_string();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 0.01);
    let o = qrm(&["--config", &cfg, "simulate", "--realtime", "--speedup", "100", "--port", &port, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn simulate_realtime_over_tcp() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 0.01);
    let o = qrm(&[
        "--config", &cfg, "simulate", "--realtime", "--speedup", "100", "--port", "0", "--nodes", "2", "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("node node-1") && out.contains("node node-2"));
    assert_eq!(out.matches("reconfigurations 2").count(), 2, "{out}");
}

#[test]
fn speedup_requires_realtime() {
    assert_eq!(qrm(&["simulate", "--speedup", "10"]).status.code(), Some(2));
}
