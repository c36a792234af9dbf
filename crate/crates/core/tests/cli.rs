use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use agentkv::metrics::{import_summary, import_trace, render_trace};

fn agentkv(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentkv"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("smoke");
    let o = agentkv(&["run", "--config", "preset:smoke"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["trace.csv", "summary.txt", "phases.txt", "series/usage.dat"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let trace = import_trace(&out.join("trace.csv")).unwrap();
    assert_eq!(
        render_trace(&trace),
        fs::read_to_string(out.join("trace.csv")).unwrap()
    );
    let summary = import_summary(&out.join("summary.txt")).unwrap();
    assert_eq!(
        summary.render(),
        fs::read_to_string(out.join("summary.txt")).unwrap()
    );
    assert_eq!(String::from_utf8(o.stdout).unwrap(), summary.render());
}

#[test]
fn bad_config_exits_2_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    for args in [
        vec!["run", "--config", "preset:nope"],
        vec![
            "run",
            "--config",
            "preset:smoke",
            "--set",
            "cache.capcity=3",
        ],
        vec![
            "run",
            "--config",
            "preset:smoke",
            "--set",
            "controller.beta=1.5",
            "--set",
            "policy=aimd",
        ],
        vec![
            "run",
            "--config",
            "preset:smoke",
            "--set",
            "cache.capacity=100",
        ],
        vec!["sweep", "--config", "preset:smoke", "--axis", "alpha"],
    ] {
        let o = agentkv(&args, &out);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        assert!(!out.exists(), "{args:?} wrote artifacts");
    }
}

#[test]
fn horizon_exits_3_with_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("h");
    let o = agentkv(
        &["run", "--config", "preset:smoke", "--set", "horizon=2.0"],
        &out,
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(out.join("trace.csv").is_file());
}

#[test]
fn seed_flag_changes_the_workload() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    agentkv(&["run", "--config", "preset:thrash", "--seed", "1"], &a);
    agentkv(&["run", "--config", "preset:thrash", "--seed", "2"], &b);
    let sa = import_summary(&a.join("summary.txt")).unwrap();
    let sb = import_summary(&b.join("summary.txt")).unwrap();
    assert_ne!(sa.stream_hash, sb.stream_hash);
}

#[test]
fn compare_then_report_reproduces_the_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cmp");
    let o = agentkv(
        &["compare", "--config", "preset:thrash", "--jobs", "2"],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("compare.txt")).unwrap();
    for name in ["uncontrolled", "request_cap", "offload", "aimd"] {
        assert!(table.contains(name));
        assert!(out.join(name).join("summary.txt").is_file());
    }
    // every run replayed the same workload
    let hashes: Vec<String> = ["uncontrolled", "request_cap", "offload", "aimd"]
        .iter()
        .map(|n| {
            import_summary(&out.join(n).join("summary.txt"))
                .unwrap()
                .stream_hash
        })
        .collect();
    assert!(hashes.windows(2).all(|w| w[0] == w[1]));

    let report = Command::new(env!("CARGO_BIN_EXE_agentkv"))
        .args(["report", "--baseline", "uncontrolled", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(report.status.success());
    let rendered = String::from_utf8(report.stdout).unwrap();
    let rows = |t: &str| {
        let mut v: Vec<String> = t.lines().map(str::to_string).collect();
        v.sort();
        v
    };
    assert_eq!(rows(&rendered), rows(&table));
}

#[test]
fn sweep_includes_the_adaptive_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sw");
    let o = agentkv(
        &[
            "sweep",
            "--config",
            "preset:thrash",
            "--axis",
            "fixed_cap",
            "--set",
            "sweep.fixed_cap=[8, 16, 32, 64]",
        ],
        &out,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = fs::read_to_string(out.join("sweep_fixed_cap.txt")).unwrap();
    for name in [
        "fixed_cap=8",
        "fixed_cap=16",
        "fixed_cap=32",
        "fixed_cap=64",
        "aimd",
    ] {
        assert!(table.contains(name), "{name} missing from\n{table}");
    }
}
