//! The binary end to end on the bundled fixtures.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_complyscan");

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("COMPLYSCAN_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("summary is JSON")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Ingest both fixture policies and build their packages under `dir`.
fn prepare(dir: &Path) -> (PathBuf, PathBuf) {
    let daa = dir.join("daa");
    let ars = dir.join("ars");
    let crop = fixture("card_crop_health.txt");
    let loan = fixture("card_loan_screening.txt");
    for (id, source, out) in [
        ("DAA", "policy_daa.txt", &daa),
        ("ARS", "policy_ars.html", &ars),
    ] {
        let summary = ok_json(&[
            "ingest-policy",
            "--source",
            s(&fixture(source)),
            "--id",
            id,
            "--name",
            id,
            "--jurisdiction",
            "Testland",
            "--out",
            s(out),
        ]);
        assert_eq!(summary["policy_id"], id);
        assert!(out.join("policy.md").exists());
        let summary = ok_json(&[
            "build-relevancy",
            "--policy",
            s(out),
            "--card",
            s(&crop),
            "--card",
            s(&loan),
        ]);
        assert_eq!(summary["unscored"], 0);
    }
    (daa, ars)
}

#[test]
fn evaluate_twice_gives_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (daa, ars) = prepare(dir.path());
    let card = fixture("card_crop_health.txt");
    let mut ids = Vec::new();
    for out in ["one", "two"] {
        let out = dir.path().join(out);
        let summary = ok_json(&[
            "evaluate",
            "--card",
            s(&card),
            "--policy",
            s(&daa),
            "--policy",
            s(&ars),
            "--out",
            s(&out),
        ]);
        ids.push(summary["run_id"].clone());
        let report = ok_json(&["report", "--run", s(&out), "--card", s(&card)]);
        assert_eq!(report["policies"], serde_json::json!(["ARS", "DAA"]));
    }
    assert_eq!(ids[0], ids[1]);
    for name in [
        "dataset.json",
        "records.csv",
        "skipped.csv",
        "ledger.csv",
        "report.json",
        "report.md",
        "heatmaps/DAA.json",
        "heatmaps/ARS.json",
    ] {
        let a = std::fs::read(dir.path().join("one").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("two").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
}

#[test]
fn metrics_verb_writes_agreement_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("agreement");
    let summary = ok_json(&[
        "metrics",
        "--ratings",
        s(&fixture("ratings.csv")),
        "--out",
        s(&out),
    ]);
    let dims = summary["dimensions"].as_array().unwrap();
    assert_eq!(dims.len(), 2);
    assert_eq!(dims[0]["items"], 20);
    let md = std::fs::read_to_string(out.join("agreement.md")).unwrap();
    assert!(md.contains("Spearman"), "{md}");
    assert!(out.join("plot_data.csv").exists());
    assert!(out.join("agreement.json").exists());
}

#[test]
fn failures_print_one_json_line_and_exit_nonzero() {
    let out = run(&[
        "evaluate",
        "--card",
        "/nonexistent/card.txt",
        "--policy",
        "/nonexistent",
        "--out",
        "/tmp/x",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let err: Value = serde_json::from_str(line).unwrap();
    assert_eq!(err["kind"], "file");
    assert_eq!(err["path"], "/nonexistent/card.txt");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[engine]\nmax_batch = 0\n").unwrap();
    let out = run(&[
        "--config",
        s(&bad),
        "metrics",
        "--ratings",
        s(&fixture("ratings.csv")),
    ]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_str(
        String::from_utf8(out.stderr)
            .unwrap()
            .lines()
            .last()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(err["kind"], "config");
}

#[test]
fn serve_on_port_zero_answers_healthz() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = Command::new(BIN)
        .args(["serve", "--port", "0", "--store", s(dir.path())])
        .env_remove("COMPLYSCAN_CONFIG")
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening on http://")
        .expect(&line)
        .to_string();

    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "GET /healthz HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n"
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.contains("\"ok\""), "{response}");
}
