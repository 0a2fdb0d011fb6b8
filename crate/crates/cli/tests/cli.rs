use std::process::{Command, Output};

use pmindex::bench::{read_csv, read_json, Workload};
use pmindex::IndexKind;

fn pmindex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmindex"))
        .args(args)
        .output()
        .expect("run pmindex")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn bench_writes_json_and_csv_reports() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("out.json");
    let o = pmindex(&[
        "bench",
        "--index",
        "art",
        "--workload",
        "a",
        "--keys",
        "string",
        "--n",
        "3000",
        "--threads",
        "2",
        "--seed",
        "4",
        "--report",
        json.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_json(std::fs::File::open(&json).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].pattern, Workload::A);
    assert_eq!(rows[1].index, IndexKind::Art);
    assert_eq!(rows[1].seed, 4);

    let csv = dir.path().join("out.csv");
    let o = pmindex(&[
        "bench",
        "--index",
        "clht",
        "--workload",
        "loada",
        "--n",
        "2000",
        "--report",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let rows = read_csv(std::fs::File::open(&csv).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert!(rows[0].clwb_per_op > 0.0);
}

#[test]
fn bench_rejects_scans_and_strings_on_clht() {
    for args in [
        ["--workload", "e", "--keys", "randint"],
        ["--workload", "a", "--keys", "string"],
    ] {
        let mut v = vec!["bench", "--index", "clht", "--n", "100"];
        v.extend(args);
        let o = pmindex(&v);
        assert_eq!(code(&o), 2);
        assert!(String::from_utf8_lossy(&o.stderr).contains("clht"));
    }
}

#[test]
fn bad_arguments_are_usage_errors() {
    assert_eq!(code(&pmindex(&["bench", "--index", "btree"])), 2);
    assert_eq!(
        code(&pmindex(&[
            "crashtest",
            "--index",
            "art",
            "--policy",
            "lenient"
        ])),
        2
    );
    assert_eq!(code(&pmindex(&["frobnicate"])), 2);
}

#[test]
fn small_crashtest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("campaign.json");
    let o = pmindex(&[
        "crashtest",
        "--index",
        "bwtree",
        "--states",
        "4",
        "--policy",
        "adversarial",
        "--seed",
        "3",
        "--load-n",
        "400",
        "--test-ops",
        "400",
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["states_run"], 4);
    assert_eq!(v["pass"], true);
}

#[test]
fn seeded_defect_fails_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmindex(&[
        "crashtest",
        "--index",
        "clht",
        "--states",
        "2",
        "--load-n",
        "300",
        "--test-ops",
        "100",
        "--mutation",
        "clht-skip-insert-persist",
        "--stop-after",
        "1",
        "--artifacts",
        dir.path().to_str().unwrap(),
        "--minimize",
    ]);
    assert_eq!(code(&o), 1);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("FAIL") && out.contains("minimized"), "{out}");
    let bundle = dir.path().join("state-0.json");
    assert!(dir.path().join("state-0.pool").exists());
    let o = pmindex(&[
        "crashtest",
        "--index",
        "clht",
        "--replay",
        bundle.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn durability_passes() {
    let o = pmindex(&["durability", "--index", "clht", "--n", "3000"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("0 unflushed dirty lines"));
}
