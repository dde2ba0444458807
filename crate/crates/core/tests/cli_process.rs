use std::fs;
use std::net::TcpListener;
use std::process::{Command, Stdio};
use std::time::Duration;

const BIN: &str = env!("CARGO_BIN_EXE_tagnio-bench");

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn data_rows(path: &std::path::Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn usage_errors_exit_with_two() {
    let out = Command::new(BIN).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(BIN)
        .args(["--mode", "latency", "--role", "server", "--connections", "0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--connections"));
}

#[test]
fn loopback_latency_sweep_in_one_process() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("lat.csv");
    let status = Command::new(BIN)
        .args(["--mode", "latency", "--role", "server", "--backend", "loopback"])
        .args(["--connections", "1..4", "--runs", "2", "--count", "200"])
        .arg("--output")
        .arg(&csv)
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(data_rows(&csv).len(), 8);
}

#[test]
fn two_process_stream_latency() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port().to_string();
    let common = ["--mode", "latency", "--port", &port, "--connections", "1..2", "--runs", "1", "--count", "500"];
    let mut server = Command::new(BIN)
        .args(common)
        .args(["--role", "server", "--output"])
        .arg(dir.path().join("s.csv"))
        .spawn()
        .unwrap();
    let client = Command::new(BIN)
        .args(common)
        .args(["--role", "client", "--output"])
        .arg(dir.path().join("c.csv"))
        .status()
        .unwrap();
    assert!(client.success());
    assert!(server.wait().unwrap().success());
    let rows = data_rows(&dir.path().join("s.csv"));
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| !r[12].is_empty()));
}

#[test]
fn vanished_peer_keeps_partial_csv() {
    let dir = tempfile::tempdir().unwrap();
    let port = free_port().to_string();
    let common = ["--mode", "throughput", "--port", &port, "--runs", "1", "--count", "1000", "--timeout", "2"];
    // The server only serves the first step of the client's sweep.
    let mut server = Command::new(BIN)
        .args(common)
        .args(["--role", "server", "--connections", "1"])
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let csv = dir.path().join("c.csv");
    let out = Command::new(BIN)
        .args(common)
        .args(["--role", "client", "--connections", "1..3", "--output"])
        .arg(&csv)
        .output()
        .unwrap();
    server.wait().unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    let rows = data_rows(&csv);
    assert_eq!(rows.len(), 1);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("mode,backend,connections"));
    let _ = Duration::ZERO;
}
