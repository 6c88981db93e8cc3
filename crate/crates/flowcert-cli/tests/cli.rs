//! Runs the compiled binary end to end: the exit-code contract, the
//! files each subcommand leaves behind, and byte-level reproducibility
//! under a fixed seed.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn flowcert() -> Command {
    Command::new(env!("CARGO_BIN_EXE_flowcert"))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited without a signal")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(dir: &Path, name: &str) -> Value {
    let text = fs::read_to_string(dir.join(name)).expect("report file exists");
    serde_json::from_str(&text).expect("report is well-formed json")
}

#[test]
fn reach_on_the_stable_line_stays_inside_the_contraction_bound() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["reach", "--bench", "lin1d-stable", "--eps", "0.1", "--tmax", "5"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);

    let r = json(dir.path(), "reach.json");
    assert_eq!(r["escaped"], Value::Bool(false));
    assert_eq!(r["unsafe_contact"], Value::Bool(false));

    // the disturbed line contracts toward |x| <= 1; at eps 0.1 the tube
    // settles well inside [-0.62, 0.62], so every occupied cell must too
    let csv = fs::read_to_string(dir.path().join("reach.csv")).unwrap();
    let (mut lo, mut hi, mut res) = (f64::NAN, f64::NAN, 0usize);
    let mut occupied = 0usize;
    for line in csv.lines() {
        if let Some(rest) = line.strip_prefix("# domain [") {
            let mut ends = rest.trim_end_matches(']').split(',');
            lo = ends.next().unwrap().parse().unwrap();
            hi = ends.next().unwrap().parse().unwrap();
        } else if let Some(rest) = line.strip_prefix("# resolution ") {
            res = rest.parse().unwrap();
        } else {
            let mut cols = line.split(',');
            let i: usize = cols.next().unwrap().parse().unwrap();
            if cols.next() == Some("1") {
                occupied += 1;
                let w = (hi - lo) / res as f64;
                let (left, right) = (lo + i as f64 * w, lo + (i + 1) as f64 * w);
                assert!(left >= -0.62 && right <= 0.62, "occupied cell [{left}, {right}]");
            }
        }
    }
    assert!(occupied > 0, "the reach tube cannot be empty");
}

#[test]
fn reach_on_the_unstable_line_reports_the_escape() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["reach", "--bench", "lin1d-unstable", "--tmax", "3"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    let r = json(dir.path(), "reach.json");
    assert!(
        r["escaped"] == Value::Bool(true) || r["unsafe_contact"] == Value::Bool(true),
        "exit 1 must be backed by a flag in the report"
    );
}

#[test]
fn a_malformed_problem_file_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("bad.problem");
    fs::write(&path, "dim = [borken\nfield = \"x\"\n").unwrap();
    let out = flowcert()
        .arg("reach")
        .arg("--problem")
        .arg(&path)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    // the message points at the offending line
    assert!(stderr(&out).contains("line 1"), "stderr: {}", stderr(&out));
}

#[test]
fn an_unknown_benchmark_name_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["reach", "--bench", "nosuch"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    // the rejection lists what would have worked
    assert!(stderr(&out).contains("lin1d-stable"), "stderr: {}", stderr(&out));
}

#[test]
fn rejected_flag_values_are_input_errors() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["reach", "--bench", "lin1d-stable", "--eps", "-1"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);

    let out = flowcert()
        .args(["certify", "--bench", "lin1d-stable", "--grid", "64,64"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2, "a 2-axis grid on a 1-d problem must be refused");
}

#[test]
fn certify_finds_the_stable_certificate() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["certify", "--bench", "lin1d-stable"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);

    let r = json(dir.path(), "certify.json");
    assert_eq!(r["status"], "found");
    assert!(r["t_found"].as_f64().unwrap() <= 2.0);
    let v = &r["verdicts"];
    for key in ["init_subset", "delta_invariant", "unsafe_disjoint"] {
        assert_eq!(v[key], Value::Bool(true), "verdict {key}");
    }
    assert!(dir.path().join("v.csv").exists());
}

#[test]
fn certify_flags_the_unstable_line_with_a_witness() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["certify", "--bench", "lin1d-unstable"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);

    let r = json(dir.path(), "certify.json");
    assert_eq!(r["status"], "unsafe-suspect");
    assert_eq!(r["witness_csv_path"], "witness.csv");
    let witness = fs::read_to_string(dir.path().join("witness.csv")).unwrap();
    assert!(witness.lines().count() > 2, "witness holds a trajectory, not a point");
}

#[test]
fn certify_on_a_hopeless_budget_stays_inconclusive() {
    // one step of headroom on a coarse grid: the search cannot settle,
    // and must say so rather than guess either way
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["certify", "--bench", "spiral2d", "--tmax", "0.5", "--grid", "32"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
    let r = json(dir.path(), "certify.json");
    assert_eq!(r["status"], "inconclusive");
}

#[test]
fn synthesize_builds_and_validates_the_stable_barrier() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["synthesize", "--bench", "lin1d-stable"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);

    let r = json(dir.path(), "synthesize.json");
    assert_eq!(r["status"], "synthesized");
    assert_eq!(r["report"]["passed"], Value::Bool(true));
    assert!(r["report"]["eps_b"].as_f64().unwrap() > 0.0);
    for dump in ["v.csv", "nu.csv", "barrier.csv"] {
        assert!(dir.path().join(dump).exists(), "missing {dump}");
    }
}

#[test]
fn synthesize_names_the_stage_that_refuses() {
    // an odd grid over a centered domain puts a cell center exactly on
    // the equilibrium, which the exit-time stage must refuse to cross
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("eq.problem");
    fs::write(
        &path,
        "dim = 1\nfield = [ \"-x1\" ]\ndomain = [ [-2, 2] ]\n\
         init = \"x1^2 <= 0.005\"\nunsafe = \"x1^2 >= 2.25\"\n",
    )
    .unwrap();
    let out = flowcert()
        .arg("synthesize")
        .arg("--problem")
        .arg(&path)
        .args(["--grid", "361"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 4);

    let r = json(dir.path(), "synthesize.json");
    assert_eq!(r["status"], "failed");
    assert_eq!(r["stage"], "exit-time non-singularity");
}

#[test]
fn check_barrier_accepts_the_parabola() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["check-barrier", "1 - x1^2", "--bench", "lin1d-stable"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    let r = json(dir.path(), "check.json");
    assert_eq!(r["passed"], Value::Bool(true));
    assert!(r["eps_b"].as_f64().unwrap() > 0.0);
}

#[test]
fn check_barrier_rejects_the_identity_with_a_counterexample() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["check-barrier", "x1", "--bench", "lin1d-stable"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    let r = json(dir.path(), "check.json");
    assert_eq!(r["passed"], Value::Bool(false));
    // the positive-on-unsafe violation comes with the point that shows it
    assert!(r["unsafe_ceiling"]["margin"].as_f64().unwrap() < 0.0);
    assert!(r["unsafe_ceiling"]["worst"].as_array().unwrap().len() == 1);
}

#[test]
fn check_barrier_rejects_nonsmooth_text_at_parse_time() {
    let dir = TempDir::new().unwrap();
    let out = flowcert()
        .args(["check-barrier", "abs(x1)", "--bench", "lin1d-stable"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("non-smooth"), "stderr: {}", stderr(&out));
}

#[test]
fn bench_lists_the_catalog_as_json() {
    let out = flowcert().arg("bench").output().unwrap();
    assert_eq!(code(&out), 0);
    let rows: Value = serde_json::from_slice(&out.stdout).unwrap();
    let names: Vec<&str> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["name"].as_str().unwrap())
        .collect();
    for expected in ["lin1d-stable", "lin1d-unstable", "spiral2d"] {
        assert!(names.contains(&expected), "missing {expected}");
    }
}

#[test]
fn bench_prints_a_problem_file_that_round_trips() {
    let out = flowcert().args(["bench", "--bench", "lin1d-stable"]).output().unwrap();
    assert_eq!(code(&out), 0);

    // what bench prints must load back through --problem unchanged
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("roundtrip.problem");
    fs::write(&path, &out.stdout).unwrap();
    let rerun = flowcert()
        .arg("reach")
        .arg("--problem")
        .arg(&path)
        .args(["--tmax", "1"])
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&rerun), 0, "stderr: {}", stderr(&rerun));
}

#[test]
fn equal_seeds_reproduce_every_byte() {
    let run = || {
        let dir = TempDir::new().unwrap();
        let out = flowcert()
            .args(["certify", "--bench", "lin1d-stable", "--seed", "7"])
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert_eq!(code(&out), 0);
        (
            fs::read(dir.path().join("certify.json")).unwrap(),
            fs::read(dir.path().join("v.csv")).unwrap(),
        )
    };
    let (report_a, v_a) = run();
    let (report_b, v_b) = run();
    assert_eq!(report_a, report_b);
    assert_eq!(v_a, v_b);
}
