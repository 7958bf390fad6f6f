// SPDX-License-Identifier: Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

fn sim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedcrypt-sim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn run_writes_report_and_transcript() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(
        dir.path(),
        "s.txt",
        "# linear model, three learners\nparties = 3\nprotocol = allreduce\nvector_length = 4\nrounds = 3\nworkload = linear:16,0.05\ntransform = modeled:0,0\n",
    );
    let csv = dir.path().join("r.csv");
    let log = dir.path().join("t.log");
    let o = sim(&[
        "run",
        "--scenario",
        &scenario,
        "--out",
        csv.to_str().unwrap(),
        "--transcript",
        log.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(&csv).unwrap();
    let mut lines = report.lines();
    assert_eq!(
        lines.next(),
        Some("parties,protocol,round,comm_time_s,transform_time_s,total_sync_time_s")
    );
    assert_eq!(lines.count(), 3);
    assert!(!std::fs::read_to_string(&log).unwrap().is_empty());
    assert!(stdout(&o).contains("max deviation from centralized descent"));
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(
        dir.path(),
        "s.txt",
        "parties = 3\nvector_length = 2\ntransform = modeled:1,1\n",
    );
    let transcript = |seed: &str, name: &str| {
        let path = dir.path().join(name);
        let o = sim(&[
            "--seed",
            seed,
            "run",
            "--scenario",
            &scenario,
            "--transcript",
            path.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read_to_string(path).unwrap()
    };
    assert_eq!(transcript("5", "a"), transcript("5", "b"));
    assert_ne!(transcript("5", "c"), transcript("6", "d"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let dir = tempfile::tempdir().unwrap();
    let aborted = write(dir.path(), "a.txt", "parties = 2\nvector_length = 2\nfailure = 1:2:0\n");
    assert_eq!(sim(&["run", "--scenario", &aborted]).status.code(), Some(2));

    let unmatched = write(
        dir.path(),
        "u.txt",
        "parties = 3\nvector_length = 2\nrounds = 1\nfailure = 4:2:0\n",
    );
    let o = sim(&["run", "--scenario", &unmatched]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAILED"));

    let broken = write(dir.path(), "b.txt", "parties = many\n");
    let o = sim(&["run", "--scenario", &broken]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("parties"));

    assert_eq!(sim(&["bench", "--length", "4"]).status.code(), Some(2));
}

#[test]
fn json_scenarios_run() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(
        dir.path(),
        "s.json",
        r#"{"parties": 4, "protocol": "broadcast", "vector_length": 3, "rounds": 2}"#,
    );
    let o = sim(&["run", "--scenario", &scenario]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("after 2 of 2 rounds"));
}

#[test]
fn bench_sorts_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = sim(&[
        "bench",
        "--parties",
        "4,3",
        "--protocols",
        "allreduce,ring",
        "--length",
        "8",
        "--transform",
        "modeled:10,1",
        "--latency-ms",
        "1",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let keys: Vec<String> = std::fs::read_to_string(&csv)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(keys, ["3,ring", "3,allreduce", "4,ring", "4,allreduce"]);
    assert!(stdout(&o).contains("ciphertext expansion at 512 bits"));
}

#[test]
fn attack_modes_report_ok() {
    let o = sim(&["attack", "--mode", "duplicate", "--parties", "4", "--ranks", "1,3"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("planted {1, 3}"));

    let o = sim(&[
        "attack",
        "--mode",
        "passthrough",
        "--parties",
        "3,4",
        "--protocol",
        "broadcast",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.contains("passthrough P=3 broadcast: 6 coalitions, smallest exposing coalition Some(2) -> ok"));
    assert!(out.contains("passthrough P=4 broadcast: 14 coalitions, smallest exposing coalition Some(3) -> ok"));
}
