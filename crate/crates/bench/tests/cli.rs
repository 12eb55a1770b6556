use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = "\
[mn]
page_size = 4K
physical_bytes = 64M
[net]
loss = 0.01
jitter_ns = 500
[cluster]
compute_nodes = 2
memory_nodes = 2
";

fn dmsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dmsim"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run(dir: &Path, config: &Path, workload: &Path, seed: &str, out: &str) -> Output {
    let out = dir.join(out);
    dmsim(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--workload",
        workload.to_str().unwrap(),
        "--seed",
        seed,
        "--out",
        out.to_str().unwrap(),
    ])
}

fn report(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join(name)).unwrap()).unwrap()
}

#[test]
fn same_inputs_give_identical_reports() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "c.ini", CONFIG);
    let workload = write(
        dir.path(),
        "w.txt",
        "kind = ycsb\nmix = a\nclients = 6\nops = 3000\nkeys = 500\ndistribution = zipf:0.99\n",
    );
    assert!(run(dir.path(), &config, &workload, "7", "a.json")
        .status
        .success());
    assert!(run(dir.path(), &config, &workload, "7", "b.json")
        .status
        .success());
    assert!(run(dir.path(), &config, &workload, "8", "c.json")
        .status
        .success());
    let a = fs::read(dir.path().join("a.json")).unwrap();
    assert_eq!(a, fs::read(dir.path().join("b.json")).unwrap());
    assert_ne!(a, fs::read(dir.path().join("c.json")).unwrap());

    let r = report(dir.path(), "a.json");
    assert_eq!(r["ops_issued"], 3000);
    assert_eq!(
        r["ops_ok"].as_u64().unwrap() + r["ops_failed"].as_u64().unwrap(),
        3000
    );
    assert_eq!(r["verify_mismatches"], 0);
    let l = &r["latency_ns"];
    assert!(l["p50"].as_u64() <= l["p99"].as_u64());
    assert!(l["p99"].as_u64() <= l["max"].as_u64());
}

#[test]
fn trace_workload_runs() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "c.ini", CONFIG);
    write(
        dir.path(),
        "ops.trace",
        "INSERT user1 100\nREAD user1\nUPDATE user1 1024\nREAD user2\nDELETE user1\nREAD user1\n",
    );
    let workload = write(
        dir.path(),
        "w.txt",
        "kind = trace\ntrace = ops.trace\nclients = 2\n",
    );
    let out = run(dir.path(), &config, &workload, "1", "r.json");
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let r = report(dir.path(), "r.json");
    assert_eq!(r["ops_issued"], 6);
    assert_eq!(r["ops_ok"], 6);
    assert_eq!(r["verify_mismatches"], 0);
}

#[test]
fn bad_trace_reports_the_line() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "c.ini", CONFIG);
    write(dir.path(), "ops.trace", "READ user1\nFROB x\n");
    let workload = write(dir.path(), "w.txt", "kind = trace\ntrace = ops.trace\n");
    let out = run(dir.path(), &config, &workload, "1", "r.json");
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2"), "{err}");
    assert!(!dir.path().join("r.json").exists());
}

#[test]
fn bad_config_reports_the_line() {
    let dir = TempDir::new().unwrap();
    let config = write(
        dir.path(),
        "c.ini",
        "[mn]\npage_size = 4K\ntlb_entries = many\n",
    );
    let workload = write(dir.path(), "w.txt", "kind = read\n");
    let out = run(dir.path(), &config, &workload, "1", "r.json");
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn empty_workloads_report_zero_ops() {
    let dir = TempDir::new().unwrap();
    let config = write(dir.path(), "c.ini", CONFIG);
    write(dir.path(), "empty.trace", "");
    for (name, text) in [
        ("ops0.txt", "kind = write\nops = 0\n"),
        ("trace.txt", "kind = trace\ntrace = empty.trace\n"),
    ] {
        let workload = write(dir.path(), name, text);
        let out = run(dir.path(), &config, &workload, "1", "r.json");
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
        let r = report(dir.path(), "r.json");
        assert_eq!(r["ops_issued"], 0);
        assert_eq!(r["latency_ns"]["count"], 0);
    }
}

#[test]
fn experiment_writes_csv() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.csv");
    let status = dmsim(&[
        "experiment",
        "--name",
        "fault_constancy",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(status.status.success());
    let csv = fs::read_to_string(out).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("occupancy_pct,"));
    assert_eq!(lines.count(), 3);
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("t.csv");
    let status = dmsim(&[
        "experiment",
        "--name",
        "frob",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("unknown experiment"));
    assert!(!out.exists());
}
