//! End-to-end runs of the `gmm-audit` binary.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use gmm_audit_cli::report::{Report, Status};
use gmm_audit_core::audit::attainable_interval;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gmm-audit"))
}

fn demo_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo")
}

fn without_timestamp(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("\"timestamp\""))
        .collect::<Vec<_>>()
        .join("\n")
}

fn run_demo(out: &Path) -> Output {
    bin()
        .arg("run")
        .arg(demo_dir().join("config.toml"))
        .arg("--output-dir")
        .arg(out)
        .output()
        .unwrap()
}

struct DemoRuns {
    _dirs: [tempfile::TempDir; 2],
    texts: [String; 2],
}

/// The demo is run twice, once per process, and shared between tests.
fn demo_runs() -> &'static DemoRuns {
    static RUNS: OnceLock<DemoRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
        let texts = [0, 1].map(|i| {
            let o = run_demo(dirs[i].path());
            assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
            std::fs::read_to_string(dirs[i].path().join("report.json")).unwrap()
        });
        DemoRuns { _dirs: dirs, texts }
    })
}

fn demo_report() -> Report {
    serde_json::from_str(&demo_runs().texts[0]).unwrap()
}

#[test]
fn criterion_10_golden_run_is_reproducible() {
    let runs = demo_runs();
    let golden = std::fs::read_to_string(demo_dir().join("expected/report.json")).unwrap();
    let a = without_timestamp(&runs.texts[0]);
    let b = without_timestamp(&runs.texts[1]);
    let pass = a == b && a == without_timestamp(&golden);
    let line = format!(
        "{} criterion 10: golden CLI run (two runs identical: {}, matches golden: {})\n",
        if pass { "PASS" } else { "FAIL" },
        a == b,
        a == without_timestamp(&golden)
    );
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(pass);
}

#[test]
fn demo_report_has_positive_j_and_monotone_widths() {
    let r = demo_report();
    assert_eq!(r.status, Status::Ok);
    assert!(r.j.as_ref().unwrap().j > 0.0);
    let audit = r.audit.unwrap();
    let widths: Vec<f64> = audit.per_tau.iter().map(|t| t.width).collect();
    assert!(widths.windows(2).all(|w| w[0] < w[1]), "{widths:?}");
}

#[test]
fn report_round_trips() {
    let r = demo_report();
    let text = r.to_json();
    assert_eq!(text, demo_runs().texts[0]);
    let back: Report = serde_json::from_str(&text).unwrap();
    assert_eq!(back, r);
}

#[test]
fn audit_intervals_follow_from_reported_values() {
    let audit = demo_report().audit.unwrap();
    for t in &audit.per_tau {
        let expect = attainable_interval(audit.theta_eff, audit.se_eff, audit.j, t.tau);
        assert_eq!(t.interval, expect, "tau {}", t.tau);
    }
}

#[test]
fn bootstrap_intervals_contain_estimates() {
    for s in demo_report().strategies {
        let b = s.bootstrap.unwrap();
        let ci = b.percentile_ci.unwrap();
        assert!(ci.lo <= s.theta_hat && s.theta_hat <= ci.hi, "{}", s.label);
        assert_eq!(b.contains_estimate, Some(true));
    }
}

#[test]
fn audit_points_file_lists_every_tau() {
    let dir = &demo_runs()._dirs[0];
    let text = std::fs::read_to_string(dir.path().join("audit_points.csv")).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("tau,theta"));
    for tau in ["0.25", "0.5", "1.0"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{tau},"))), "tau {tau}");
    }
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"
config_version = 1
seed = 7
data_path = "data.csv"
[model]
name = "mean_square_match"
[[strategies]]
kind = "two_step"
"#;

fn small_data(dir: &Path, bad_row: bool) {
    let mut text = String::from("x\n");
    for i in 0..40 {
        if bad_row && i == 5 {
            text.push_str("NA\n");
        } else {
            text.push_str(&format!("{}\n", (i as f64 * 0.37).sin() + 0.3));
        }
    }
    std::fs::write(dir.join("data.csv"), text).unwrap();
}

#[test]
fn unknown_strategy_kind_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), false);
    let cfg = write_config(dir.path(), &SMALL.replace("two_step", "three_step"));
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("strategies[0].kind") && err.contains("three_step"), "{err}");
    assert!(!dir.path().join("output").exists());
}

#[test]
fn missing_seed_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), false);
    let cfg = write_config(dir.path(), &SMALL.replace("seed = 7\n", ""));
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
}

#[test]
fn na_cell_writes_an_error_report() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), true);
    let cfg = write_config(dir.path(), SMALL);
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let text = std::fs::read_to_string(dir.path().join("output/report.json")).unwrap();
    let r: Report = serde_json::from_str(&text).unwrap();
    assert_eq!(r.status, Status::Error);
    let e = r.error.unwrap();
    assert_eq!(e.kind, "parse");
    assert!(e.message.contains("row 6") && e.message.contains("NA"), "{}", e.message);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), false);
    let cfg = write_config(dir.path(), SMALL);
    let o = bin().arg("run").arg(&cfg).args(["--seed", "99"]).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Report =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("output/report.json")).unwrap()).unwrap();
    assert_eq!(r.provenance.seed, 99);
    assert!(r.audit.is_none());
}

#[test]
fn limit_lab_exact_section_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
config_version = 1
seed = 11
[limit_lab]
experiment = "exact"
instances = 10
n_weights = 100
"#,
    );
    let o = bin().arg("limit-lab").arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("output/report.json")).unwrap();
    assert!(text.contains("\"experiment\": \"exact\""));
}

#[test]
fn limit_lab_command_needs_its_section() {
    let dir = tempfile::tempdir().unwrap();
    small_data(dir.path(), false);
    let cfg = write_config(dir.path(), SMALL);
    let o = bin().arg("limit-lab").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn verify_passes_on_a_small_run() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["verify", "--instances", "12", "--weights", "200", "--output-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 7, "{out}");
    assert!(dir.path().join("verify.json").exists());
}
