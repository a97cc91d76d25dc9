use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nicstack"))
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

#[test]
fn lists_every_scenario() {
    let out = String::from_utf8(run(&["list-scenarios"]).stdout).unwrap();
    for k in [
        "echo_server",
        "tx_compare",
        "rx_sweep",
        "notify_bench",
        "latency_l2_reflector",
        "offload_linked_list",
        "offload_batched_read",
        "bulk_transfer",
    ] {
        assert!(
            out.lines().any(|l| l.starts_with(k)),
            "{k} missing from\n{out}"
        );
    }
}

#[test]
fn run_writes_jsonl_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios().join("latency_l2_reflector.cfg");
    let out = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(dir.path().join("latency_l2_reflector_summary.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), csv);
    assert!(csv.starts_with("scenario,run,metric,value\n"));
    let jsonl = std::fs::read_to_string(dir.path().join("latency_l2_reflector.jsonl")).unwrap();
    for line in jsonl.lines() {
        serde_json::from_str::<serde_json::Value>(line).unwrap();
    }
    assert!(jsonl.contains("low_latency"));
}

#[test]
fn seed_flag_overrides_file() {
    let cfg = scenarios().join("bulk_transfer.cfg");
    let go = |seed: &str| {
        let dir = tempfile::tempdir().unwrap();
        run(&[
            "run",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .stdout
    };
    assert_eq!(go("3"), go("3"));
    assert_ne!(go("3"), go("4"));
}

#[test]
fn profile_flag_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = scenarios().join("latency_l2_reflector.cfg");
    let base = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ])
    .stdout;
    let wide = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--profile",
        scenarios().join("wide.profile").to_str().unwrap(),
    ])
    .stdout;
    assert_ne!(base, wide);
}

#[test]
fn bad_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.cfg");
    std::fs::write(&f, "scenario = bulk_transfer\nseed = 1\nloss = 2\n").unwrap();
    let out = bin()
        .args([
            "run",
            f.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("loss"), "{err}");

    std::fs::write(&f, "seed = 1\n").unwrap();
    let out = bin().args(["run", f.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenario"));
}

#[test]
fn selftest_passes() {
    let out = String::from_utf8(run(&["selftest", "--seed", "2"]).stdout).unwrap();
    assert_eq!(
        out.lines().filter(|l| l.starts_with("ok")).count(),
        5,
        "{out}"
    );
}
