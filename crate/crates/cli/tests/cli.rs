use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unison-lab"))
        .args(args)
        .env_remove("UNISON_LAB_THREADS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn steps(trace: &str) -> Vec<&str> {
    trace.lines().filter(|l| l.starts_with("step=")).collect()
}

fn fixture(name: &str, file: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name).join(file);
    fs::read_to_string(path).unwrap()
}

#[test]
fn scripted_run_reproduces_the_chain_fixture() {
    let dir = tempdir().unwrap();
    let script = dir.path().join("s.sel");
    fs::write(&script, fixture("exemple1", "script")).unwrap();
    let policy = format!("script:{}", script.display());
    let o = lab(&["run", "--topology", "chain:5", "--init", "1,7,6,7,13", "--policy", &policy, "--max-steps", "5"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert_eq!(steps(&out), steps(&fixture("exemple1", "expected")));
}

#[test]
fn two_crashed_ends_freeze_with_exit_2() {
    let o = lab(&[
        "run", "--topology", "chain:5", "--init", "0,1,2,3,4", "--crash", "0@0", "--crash", "4@0", "--policy", "lru",
        "--max-steps", "100",
    ]);
    assert_eq!(code(&o), 2);
    let out = stdout(&o);
    assert!(out.contains("status=terminal"));
    assert!(steps(&out).is_empty());
}

#[test]
fn random_ring_run_stabilizes() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("r.trace");
    let o = lab(&[
        "run", "--topology", "ring:6", "--init", "random:42:10", "--crash", "2@0", "--policy", "lru", "--max-steps",
        "10000", "--stop", "gamma1-stable:100", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("status=gamma1-stable"));
    let text = fs::read_to_string(&out).unwrap();
    assert!(steps(&text).last().unwrap().contains("gamma1=1"));
}

#[test]
fn config_file_and_flags_give_the_same_trace() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        "# ring run\ntopology = ring:5\ninit = random:7:9\ncrash = 1@3\npolicy = random:11\nmax-steps = 60\n",
    )
    .unwrap();
    let a = lab(&["run", "--config", cfg.to_str().unwrap()]);
    let b = lab(&[
        "run", "--topology", "ring:5", "--init", "random:7:9", "--crash", "1@3", "--policy", "random:11",
        "--max-steps", "60",
    ]);
    assert_eq!(code(&a), 0);
    assert_eq!(stdout(&a), stdout(&b));
    let c = lab(&["run", "--config", cfg.to_str().unwrap(), "--max-steps", "10"]);
    assert_eq!(steps(&stdout(&c)).len(), 10);
}

#[test]
fn seed_sweep_writes_one_trace_per_seed() {
    let dir = tempdir().unwrap();
    let o = lab(&[
        "run", "--topology", "chain:6", "--init", "random:0:10", "--crash", "3@0", "--seeds", "0..4", "--stop",
        "gamma1", "--max-steps", "500", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    for s in 0..4 {
        let text = fs::read_to_string(dir.path().join(format!("seed-{s}.trace"))).unwrap();
        assert!(text.contains(&format!("seed={s}")));
    }
    assert!(!dir.path().join("seed-4.trace").exists());
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn thread_count_does_not_change_sweep_output() {
    let run = |threads: &str| {
        let dir = tempdir().unwrap();
        let o = Command::new(env!("CARGO_BIN_EXE_unison-lab"))
            .args(["run", "--topology", "ring:4", "--init", "random:0:6", "--seeds", "0..3", "--max-steps", "40"])
            .args(["--out", dir.path().to_str().unwrap()])
            .env("UNISON_LAB_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        (0..3)
            .map(|s| fs::read_to_string(dir.path().join(format!("seed-{s}.trace"))).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run("1"), run("3"));
    let bad = Command::new(env!("CARGO_BIN_EXE_unison-lab"))
        .args(["scenario", "exemple1"])
        .env("UNISON_LAB_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&bad), 64);
}

#[test]
fn bad_flags_exit_64() {
    assert_eq!(code(&lab(&["run", "--topology", "chain:5"])), 64);
    assert_eq!(code(&lab(&["run", "--topology", "blob:5", "--init", "1,2"])), 64);
    assert_eq!(code(&lab(&["run", "--topology", "chain:3", "--init", "1,2"])), 64);
    assert_eq!(code(&lab(&["check", "--topology", "chain:3", "--checks", "liveness"])), 64);
    assert_eq!(code(&lab(&["frobnicate"])), 64);
    assert_eq!(code(&lab(&["--help"])), 0);
}

#[test]
fn illegal_script_exits_65_with_the_step() {
    let dir = tempdir().unwrap();
    let script = dir.path().join("bad.sel");
    // p1 and p2 are neighbours, so the second step is not independent.
    fs::write(&script, "1,4\n1,2\n").unwrap();
    let policy = format!("script:{}", script.display());
    let o = lab(&["run", "--topology", "chain:5", "--init", "1,7,6,7,13", "--policy", &policy]);
    assert_eq!(code(&o), 65);
    assert!(String::from_utf8_lossy(&o.stderr).contains("step 1"));
}

#[test]
fn local_checks_pass_on_a_small_chain() {
    let dir = tempdir().unwrap();
    let o = lab(&[
        "check", "--topology", "chain:4", "--span", "3", "--checks", "closure,blocking,priority,potential", "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let report = fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert_eq!(report.lines().filter(|l| l.contains("violations=0")).count(), 4);
}

#[test]
fn starvation_witness_on_the_y_network() {
    let dir = tempdir().unwrap();
    let o = lab(&[
        "check", "--topology", "y:1", "--crash", "0", "--span", "4", "--checks", "starvation:strong",
        "--expect-witness", "--out", dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let witness = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("witness-"))
        .expect("witness written");
    let text = fs::read_to_string(&witness).unwrap();
    assert!(text.contains("status=lasso"));

    let csv = dir.path().join("w.csv");
    let o = lab(&["plotdata", witness.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let rows = fs::read_to_string(csv).unwrap().lines().count() - 1;
    let n = steps(&text)[0].split("clocks=").nth(1).unwrap().split(' ').next().unwrap().split(',').count();
    assert_eq!(rows, steps(&text).len() * n);
}

#[test]
fn no_starvation_on_a_ring_with_one_crash() {
    let o = lab(&["check", "--topology", "ring:5", "--crash", "0", "--span", "4", "--checks", "starvation:strong"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("violations=0"));
    let o = lab(&[
        "check", "--topology", "ring:5", "--crash", "0", "--span", "4", "--checks", "starvation:strong",
        "--expect-witness",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn scenarios_replay_and_unknown_names_exit_66() {
    assert_eq!(code(&lab(&["scenario", "exemple2"])), 0);
    assert_eq!(code(&lab(&["scenario", "impf2_freeze"])), 0);
    assert_eq!(code(&lab(&["scenario", "nope"])), 66);
    assert_eq!(code(&lab(&["plotdata", "/nonexistent/t.trace"])), 66);
}

#[test]
fn scenario_directory_with_a_wrong_expectation_fails() {
    let dir = tempdir().unwrap();
    let case = dir.path().join("broken");
    fs::create_dir(&case).unwrap();
    for f in ["topology", "initial", "script"] {
        fs::write(case.join(f), fixture("exemple1", f)).unwrap();
    }
    let expected = fixture("exemple1", "expected").replace("clocks=3,4,4,4,4", "clocks=3,4,4,4,5");
    fs::write(case.join("expected"), expected).unwrap();
    let o = lab(&["scenario", "broken", "--dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    fs::write(case.join("expected"), fixture("exemple1", "expected")).unwrap();
    assert_eq!(code(&lab(&["scenario", "broken", "--dir", dir.path().to_str().unwrap()])), 0);
}
