use std::process::{Command, Output};

use fmtree::bench::ExperimentReport;

fn fmbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmbench"))
        .args(args)
        .output()
        .expect("spawn fmbench")
}

const SMALL: &[&str] = &["--trials", "2", "--baseline-inserts", "100", "--ops", "400", "--blocks", "512"];

#[test]
fn run_writes_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("r.json");
    let mut args = vec!["run", "--out", path.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let out = fmbench(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: ExperimentReport = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(report.trials.len(), 2);
    assert_eq!(report.config.mixed_ops, 400);
    assert!(String::from_utf8_lossy(&out.stderr).contains("erase_ratio="));
}

#[test]
fn run_csv_to_stdout() {
    let mut args = vec!["run", "--format", "csv"];
    args.extend_from_slice(SMALL);
    let out = fmbench(&args);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "trial,tree,cell_reads,cell_programs,block_erases,max_block_erases,erase_ratio,read_ratio,program_ratio,synthetic_cost_us"
    );
    assert_eq!(lines.len(), 1 + 2 * 2 + 2);
    assert!(lines[1].starts_with("0,fm,"));
    assert!(lines[5].starts_with("mean,fm,"));
    assert!(lines[6].starts_with("mean,baseline,"));
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 10, "{line}");
    }
}

#[test]
fn bad_config_exits_2() {
    for args in [
        &["run", "--insert-fraction", "1.5"][..],
        &["run", "--slots-per-node", "7"],
        &["run", "--q", "2"],
        &["run", "--trials", "0"],
        &["run", "--format", "xml"],
    ] {
        let out = fmbench(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn undersized_device_exits_1() {
    let out = fmbench(&["run", "--blocks", "32", "--trials", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("device full"));
}

#[test]
fn unwritable_destination_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("missing").join("r.json");
    let mut args = vec!["run", "--out", path.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    let out = fmbench(&args);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_reports_each_seed() {
    let out = fmbench(&["verify", "--seed", "3", "--seeds", "2", "--ops", "2000"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l.ends_with(": pass")));
    assert!(lines.iter().any(|l| l.starts_with("seed 4 Baseline")));
}
