// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dcrsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcrsim"))
        .args(args)
        .output()
        .unwrap()
}

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("examples")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_build_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let topo = dir.path().join("t.topo");
    let over = dir.path().join("o.ovl");
    assert!(dcrsim(&[
        "gen-topology",
        "--seed",
        "4",
        "--n",
        "11",
        "--out",
        s(&topo)
    ])
    .status
    .success());
    let text = std::fs::read_to_string(&topo).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("dcr ")).count(), 11);

    assert!(
        dcrsim(&["build-overlay", s(&topo), "--alg", "2", "--out", s(&over)])
            .status
            .success()
    );
    let out = dcrsim(&["eval-overlay", s(&over), "--topology", s(&topo)]);
    assert!(out.status.success());
    let line = String::from_utf8(out.stdout).unwrap();
    assert!(
        line.starts_with("worst=") && line.contains(" avg=") && line.contains(" overhead="),
        "{line}"
    );
}

#[test]
fn eval_hand_built_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("o.ovl");
    std::fs::write(&path, "root 1\nedge 1 2 10\nedge 2 3 8\n").unwrap();
    let out = dcrsim(&["eval-overlay", s(&path)]);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "worst=18.00 avg=12.00 overhead=18.00\n"
    );

    std::fs::write(&path, "root 1\nedge 1 2 7\n").unwrap();
    let out = dcrsim(&["eval-overlay", s(&path)]);
    assert_eq!(
        String::from_utf8(out.stdout).unwrap(),
        "worst=7.00 avg=7.00 overhead=7.00\n"
    );

    std::fs::write(&path, "root 1\nedge 1 2 7\nedge 3 4 1\n").unwrap();
    let out = dcrsim(&["eval-overlay", s(&path)]);
    assert!(!out.status.success());
}

#[test]
fn usage_errors_are_one_line() {
    for args in [
        &["gen-topology", "--n", "1"][..],
        &["build-overlay", "x.topo", "--alg", "4"],
        &["compare", "--count", "0"],
        &["frobnicate"],
    ] {
        let out = dcrsim(args);
        assert!(!out.status.success(), "{args:?}");
        let err = String::from_utf8(out.stderr).unwrap();
        assert_eq!(err.lines().count(), 1, "{args:?}: {err}");
    }
}

#[test]
fn malformed_topology_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.topo");
    std::fs::write(&path, "dcr 1 0 0\ndcr 2 zero 0\n").unwrap();
    let out = dcrsim(&["build-overlay", s(&path)]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 2"));
}

#[test]
fn compare_one_topology() {
    let out = dcrsim(&["compare", "--seed", "7", "--count", "1"]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().last().unwrap().starts_with("# mean"));
}

#[test]
fn run_migration_example() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.csv");
    let trace = dir.path().join("r.trace");
    let out = dcrsim(&[
        "run",
        "--topology",
        s(&example("four_dc.topo")),
        "--scenario",
        s(&example("migration.scn")),
        "--alg",
        "3",
        "--out",
        s(&report),
        "--trace",
        s(&trace),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(&report).unwrap();
    let last_row = csv.lines().rfind(|l| !l.starts_with('#')).unwrap();
    assert_eq!(last_row.split(',').nth(7), Some("2"));
    assert!(std::fs::read_to_string(&trace)
        .unwrap()
        .contains("NOTIFY 1 MIGRATION"));
}

#[test]
fn run_with_overlay_file_and_empty_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let over = dir.path().join("o.ovl");
    let scn = dir.path().join("empty.scn");
    std::fs::write(&scn, "# nothing happens\n").unwrap();
    assert!(dcrsim(&[
        "build-overlay",
        s(&example("four_dc.topo")),
        "--alg",
        "1",
        "--out",
        s(&over)
    ])
    .status
    .success());
    let out = dcrsim(&[
        "run",
        "--topology",
        s(&example("four_dc.topo")),
        "--scenario",
        s(&scn),
        "--overlay",
        s(&over),
    ]);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.contains("packets=0 delivered=0 miss=0"));
}

#[test]
fn run_reports_offending_scenario_line() {
    let dir = tempfile::tempdir().unwrap();
    let scn = dir.path().join("bad.scn");
    std::fs::write(&scn, "0 user u 0 0\n\n5 send u ghost\n").unwrap();
    let out = dcrsim(&[
        "run",
        "--topology",
        s(&example("four_dc.topo")),
        "--scenario",
        s(&scn),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("line 3"));
}
