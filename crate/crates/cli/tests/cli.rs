use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use iava_core::protocol::trace::{write_traces, Candidate, TraceRecord};

fn iava(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iava"))
        .args(args)
        .env_remove("IAVA_LOG")
        .output()
        .expect("run iava")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

fn record(id: &str, n: usize) -> TraceRecord {
    let att1: Vec<f64> = (0..n).map(|k| if k % 5 == 0 { 0.2 } else { 0.01 }).collect();
    let att2: Vec<f64> = (0..n).map(|k| if k % 5 == 0 { 0.02 } else { 0.03 }).collect();
    TraceRecord {
        id: id.into(),
        n_tokens: n,
        att1,
        att2,
        candidates: vec![
            Candidate {
                label: "yes".into(),
                base: 1.0,
                negative: 2.5,
            },
            Candidate {
                label: "no".into(),
                base: 0.0,
                negative: 0.0,
            },
        ],
        gold: "no".into(),
    }
}

fn trace_file(dir: &Path, records: &[TraceRecord]) -> String {
    let path = dir.join("trace.jsonl");
    write_traces(records, &path).unwrap();
    path.to_str().unwrap().to_string()
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts `iava serve-toy` on an ephemeral port and returns its address.
fn serve_toy() -> (Server, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_iava"))
        .args(["serve-toy", "--addr", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();
    (Server(child), addr)
}

#[test]
fn select_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    let trace = trace_file(dir.path(), &[record("a", 32), record("b", 32), record("c", 32)]);
    let out = iava(&["select", "--trace", &trace]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let lines: Vec<serde_json::Value> = stdout(&out).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["id"], "a");
    assert_eq!(lines[0]["i"], 16);
    assert_eq!(lines[0]["selected"], serde_json::json!([0, 5, 10, 15, 20, 25, 30]));
}

#[test]
fn select_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let trace = trace_file(dir.path(), &[record("a", 10)]);
    let report = dir.path().join("sel.jsonl");
    let out = iava(&[
        "select",
        "--trace",
        &trace,
        "--i",
        "3",
        "--lambda",
        "-0.5",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let body = std::fs::read_to_string(report).unwrap();
    assert_eq!(body.lines().count(), 1);
    assert!(body.ends_with('\n'));
}

#[test]
fn select_parse_error_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.jsonl");
    std::fs::write(&path, "{\"version\":1}\n{\"id\": broken\n").unwrap();
    let out = iava(&["select", "--trace", path.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));
}

#[test]
fn select_rank_out_of_range_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let trace = trace_file(dir.path(), &[record("a", 32)]);
    let out = iava(&["select", "--trace", &trace, "--i", "40"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
}

#[test]
fn select_needs_explicit_params_for_unknown_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let trace = trace_file(dir.path(), &[record("a", 10)]);
    assert_eq!(code(&iava(&["select", "--trace", &trace])), 4);
}

#[test]
fn select_invariant_violation() {
    let dir = tempfile::tempdir().unwrap();
    let mut bad = record("bad", 32);
    bad.att1.pop();
    let trace = trace_file(dir.path(), &[bad]);
    let out = iava(&["select", "--trace", &trace]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("bad"));
}

#[test]
fn missing_trace_file_is_parse_error() {
    assert_eq!(code(&iava(&["select", "--trace", "/nonexistent/trace.jsonl"])), 2);
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&iava(&["simulate", "--strategy", "magic"])), 4);
    assert_eq!(code(&iava(&["simulate", "--alpha", "-1"])), 4);
    assert_eq!(code(&iava(&["simulate", "--n", "0"])), 4);
    assert_eq!(
        code(&iava(&["simulate", "--noise-sigma", "0", "--strategy", "noise"])),
        4
    );
    assert_eq!(code(&iava(&["frobnicate"])), 4);
}

/// Accuracy column of a one-row table; labels may contain spaces, so count from the right.
fn accuracy(table: &str) -> f64 {
    let row: Vec<&str> = table.lines().nth(1).unwrap().split_whitespace().collect();
    row[row.len() - 8].parse().unwrap()
}

#[test]
fn simulate_defaults() {
    let out = iava(&["simulate"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = stdout(&out);
    let header: Vec<&str> = table.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(&header[1..5], ["accuracy", "precision", "recall", "f1"]);
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn simulate_iava_beats_base() {
    let base = iava(&["simulate", "--n", "300", "--strategy", "none"]);
    let ours = iava(&["simulate", "--n", "300", "--strategy", "iava"]);
    assert!(accuracy(&stdout(&ours)) > accuracy(&stdout(&base)));
}

#[test]
fn simulate_alpha_zero_is_base() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    iava(&[
        "simulate",
        "--n",
        "300",
        "--strategy",
        "none",
        "--report",
        a.to_str().unwrap(),
    ]);
    iava(&[
        "simulate",
        "--n",
        "300",
        "--alpha",
        "0",
        "--report",
        b.to_str().unwrap(),
    ]);
    let ra: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a).unwrap()).unwrap();
    let rb: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(b).unwrap()).unwrap();
    assert_eq!(ra["result"], rb["result"]);
}

#[test]
fn reports_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for path in [&a, &b] {
        let out = iava(&[
            "simulate",
            "--n",
            "200",
            "--seed",
            "7",
            "--strategy",
            "noise",
            "--report",
            path.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
    }
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn sweep_runs_and_rejects_empty_list() {
    let out = iava(&["sweep", "--n", "100", "--i-values", "2,8"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 3);
    assert_eq!(code(&iava(&["sweep", "--n", "100", "--i-values"])), 4);
    assert_eq!(code(&iava(&["sweep", "--n", "100"])), 4);
    assert_eq!(code(&iava(&["sweep", "--n", "100", "--i-values", "2,32"])), 4);
}

#[test]
fn eval_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("answers.txt");
    std::fs::write(&path, "yes\nno\nno\nyes\n").unwrap();
    let p = path.to_str().unwrap();
    let out = iava(&["eval", "--pred", p, "--gold", p]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table = stdout(&out);
    let row: Vec<&str> = table.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(&row[1..5], ["1.0000", "1.0000", "1.0000", "1.0000"]);
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred.txt");
    let gold = dir.path().join("gold.txt");
    std::fs::write(&pred, "yes\nno\n").unwrap();
    std::fs::write(&gold, "yes\n").unwrap();
    let (p, g) = (pred.to_str().unwrap(), gold.to_str().unwrap());
    assert_eq!(code(&iava(&["eval", "--pred", p, "--gold", g])), 3);
    std::fs::write(&gold, "yes\nperhaps\n").unwrap();
    assert_eq!(code(&iava(&["eval", "--pred", p, "--gold", g])), 2);
    assert_eq!(code(&iava(&["eval", "--pred", p])), 4);
}

#[test]
fn eval_trace_replay() {
    let dir = tempfile::tempdir().unwrap();
    let trace = trace_file(dir.path(), &[record("a", 32), record("b", 32)]);
    let contrast = iava(&["eval", "--trace", &trace]);
    assert_eq!(code(&contrast), 0, "{}", stderr(&contrast));
    assert_eq!(accuracy(&stdout(&contrast)), 1.0);
    let base = iava(&["eval", "--trace", &trace, "--alpha", "0"]);
    assert_eq!(accuracy(&stdout(&base)), 0.0);
}

#[test]
fn decode_against_served_toy() {
    let (_server, addr) = serve_toy();
    let out = iava(&[
        "decode",
        "--endpoint",
        &addr,
        "--query",
        "Is the target object present in the image?",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let mut lines = text.lines();
    let ids = lines.next().unwrap();
    let words = lines.next().unwrap();
    assert!(ids.ends_with('2'));
    assert!(words == "yes eos" || words == "no eos", "{words}");
    assert!(stderr(&out).contains("iava-mask keep="));
}

#[test]
fn simulate_over_served_toy_matches_in_process() {
    let (_server, addr) = serve_toy();
    let local = iava(&["simulate", "--n", "200"]);
    let remote = iava(&["simulate", "--n", "200", "--endpoint", &addr]);
    assert_eq!(code(&remote), 0, "{}", stderr(&remote));
    assert_eq!(stdout(&local), stdout(&remote));
}

#[test]
fn unreachable_endpoint() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let addr = format!("127.0.0.1:{port}");
    assert_eq!(code(&iava(&["decode", "--endpoint", &addr, "--query", "q"])), 5);
    assert_eq!(code(&iava(&["simulate", "--endpoint", &addr])), 5);
}
