use std::path::Path;
use std::process::{Command, Output};

const CYCLE: &str = "a :- not b.\nb :- not a.\n";

fn ndprop(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ndprop"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).expect("utf-8")
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cycle.lp"), CYCLE).unwrap();
    std::fs::write(dir.path().join("odd.lp"), "a :- not a.\n").unwrap();
    dir
}

#[test]
fn enumerate_lists_both_models() {
    let dir = workspace();
    let o = ndprop(dir.path(), &["enumerate", "--program", "cycle.lp"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let mut lines: Vec<&str> = out.lines().collect();
    lines.sort();
    assert_eq!(lines, ["a", "b"]);
}

#[test]
fn solve_reports_model_or_budget() {
    let dir = workspace();
    let o = ndprop(
        dir.path(),
        &["solve", "--program", "cycle.lp", "--restarts", "3"],
    );
    assert!(o.status.success());
    let model = stdout(&o);
    assert!(model == "a\n" || model == "b\n", "{model:?}");

    let o = ndprop(
        dir.path(),
        &["solve", "--program", "odd.lp", "--restarts", "4"],
    );
    assert!(o.status.success());
    assert_eq!(stdout(&o), "UNSAT-WITHIN-BUDGET\n");
}

#[test]
fn guided_solve_hits_target() {
    let dir = workspace();
    let o = ndprop(
        dir.path(),
        &[
            "solve",
            "--program",
            "cycle.lp",
            "--policy",
            "guided",
            "--target",
            "b",
        ],
    );
    assert!(o.status.success());
    assert_eq!(stdout(&o), "b\n");
}

#[test]
fn check_verdicts() {
    let dir = workspace();
    let o = ndprop(
        dir.path(),
        &[
            "check",
            "--program",
            "cycle.lp",
            "--tau",
            "1,0",
            "--phi",
            "0,1",
        ],
    );
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("STABLE"));
    let o = ndprop(
        dir.path(),
        &[
            "check",
            "--program",
            "cycle.lp",
            "--tau",
            "0.5,0.5",
            "--phi",
            "0.5,0.5",
        ],
    );
    assert!(stdout(&o).starts_with("NOT-BINARY"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = workspace();
    assert_eq!(ndprop(dir.path(), &["solve"]).status.code(), Some(1));
    assert_eq!(ndprop(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(
        ndprop(dir.path(), &["enumerate", "--program", "missing.lp"])
            .status
            .code(),
        Some(1)
    );
    std::fs::write(dir.path().join("bad.lp"), "a :- .\n").unwrap();
    assert_eq!(
        ndprop(dir.path(), &["enumerate", "--program", "bad.lp"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(ndprop(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn failed_gradient_check_is_internal() {
    let dir = workspace();
    let o = ndprop(
        dir.path(),
        &["gradcheck", "--programs", "2", "--tolerance", "1e-30"],
    );
    assert_eq!(o.status.code(), Some(2));
    let o = ndprop(dir.path(), &["gradcheck", "--programs", "2"]);
    assert!(o.status.success());
}

#[test]
fn generate_train_eval_pipeline() {
    let dir = workspace();
    let gen = [
        "generate", "--train", "4", "--val", "2", "--test", "3", "--out", "data",
    ];
    assert!(ndprop(dir.path(), &gen).status.success());
    for f in [
        "manifest",
        "train/0000.lp",
        "train/0000.models",
        "test/0002.lp",
    ] {
        assert!(dir.path().join("data").join(f).exists(), "{f}");
    }
    let train = [
        "train",
        "--data",
        "data",
        "--epochs",
        "1",
        "--hidden",
        "3",
        "--logical",
        "2",
        "--batch",
        "2",
        "--out",
        "w.ndpw",
    ];
    assert!(ndprop(dir.path(), &train).status.success());
    let o = ndprop(
        dir.path(),
        &[
            "eval",
            "--data",
            "data",
            "--weights",
            "w.ndpw",
            "--restarts",
            "1,10",
        ],
    );
    assert!(o.status.success());
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "split,mode,solve_rate,mean_decisions,wall_ms,seed"
    );
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("easy,rdprop-1,"));
    assert!(lines[3].starts_with("easy,ndprop,"));
}

#[test]
fn reruns_are_identical() {
    let dir = workspace();
    let args = [
        "solve",
        "--program",
        "cycle.lp",
        "--seed",
        "11",
        "--restarts",
        "2",
    ];
    let first = ndprop(dir.path(), &args);
    for _ in 0..3 {
        assert_eq!(ndprop(dir.path(), &args).stdout, first.stdout);
    }
}
