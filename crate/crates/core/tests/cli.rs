use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn cps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cps")).args(args).output().expect("spawn cps")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn script(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scripts").join(name).display().to_string()
}

#[test]
fn enumerate_prints_count_and_cost() {
    let o = cps(&["enumerate", "--l", "10", "--k", "10", "--bits", "16"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), "interleavings: 184756\nbrute_force_cost: 793520977739776\n");
}

#[test]
fn reproduce_every_figure() {
    let dir = tempfile::tempdir().unwrap();
    for fig in ["fig1", "fig2", "fig3"] {
        let o = cps(&["reproduce", fig, "--out", dir.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{fig}: {}", stdout(&o));
        assert!(!stdout(&o).contains("FAIL"));
        assert!(dir.path().join(format!("{fig}.jsonl")).exists());
        assert!(dir.path().join(format!("{fig}.txt")).exists());
    }
    let summary = std::fs::read_to_string(dir.path().join("fig2.jsonl")).unwrap();
    assert!(summary.lines().last().unwrap().contains("\"verdict\":\"CompletedWithAnomalies\""));
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cps(&["reproduce", "fig4", "--out", "/tmp"]).status.code(), Some(2));
    assert_eq!(cps(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cps(&["sweep", "--program-a", "incrypto_P1", "--program-b", "table2_P2"]).status.code(), Some(2));
    assert_eq!(cps(&["repl", "--profile", "nope"]).status.code(), Some(2));
    assert_eq!(cps(&["serve", "--config", "/no/such/file"]).status.code(), Some(2));
    assert_eq!(cps(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_sequence_file() {
    let o = cps(&["run", &script("table2.seq"), "--profile", "incrypto"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 17);
    assert_eq!(out.lines().last().unwrap(), "summary: Completed, anomalies: 10, errors: 0");
}

#[test]
fn run_scripts_and_assertions() {
    for (profile, name) in [("infineon", "fig1.cps"), ("incrypto", "fig2.cps"), ("incrypto", "fig3.cps")] {
        let o = cps(&["run", &script(name), "--profile", profile]);
        assert!(o.status.success(), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    // fig2 on the wrong card: the first modified command hits the catch-all.
    let o = cps(&["run", &script("fig2.cps"), "--profile", "infineon"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("expected 9000, card answered 6D00"));
}

#[test]
fn sweep_exhaustive_sampled_and_adjacent() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs.jsonl");
    let o = cps(&[
        "sweep", "--program-a", "infineon_P2", "--program-b", "incrypto_challenge", "--seed", "3", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("runs: 21\n"));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().filter(|l| l.contains("\"summary\"")).count(), 21);
    let o = cps(&["sweep", "--program-a", "infineon_P2", "--program-b", "incrypto_challenge", "--seed", "3", "--adjacent"]);
    assert!(stdout(&o).contains("completed_with_anomalies: 6\n"));
    let a = cps(&["sweep", "--program-a", "incrypto_P1", "--program-b", "table2_P2", "--seed", "9", "--sample", "200"]);
    let b = cps(&["sweep", "--program-a", "incrypto_P1", "--program-b", "table2_P2", "--seed", "9", "--sample", "200"]);
    assert!(a.status.success());
    assert_eq!(a.stdout, b.stdout);
    assert!(stdout(&a).contains("interleavings: 184756\n"));
}

#[test]
fn repl_reads_directives_from_stdin() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_cps"))
        .args(["repl", "--profile", "incrypto"])
        .current_dir(Path::new(env!("CARGO_MANIFEST_DIR")))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"apdu 00 A4 00 00 FF\nbogus\nreset\nrun scripts/table2.seq\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().map(|l| l.trim_start_matches("cps> ")).collect();
    assert_eq!(lines[0], "9000");
    assert!(lines[1].starts_with("error: unknown directive"));
    assert_eq!(lines[2], "reset");
    assert!(text.contains("summary: Completed, anomalies: 10"));
}
