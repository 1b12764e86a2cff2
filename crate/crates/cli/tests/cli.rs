use std::path::Path;
use std::process::{Command, Output};

const FIG2B: &str = "\
# form machine v1
signature
constants o0 o1 o4
unary yellow o0 o1
unary blue o4
proposition goal
end
state u_I initial
state u_1
state u_2
state u_acc accepting
edge u_I u_1 0 \"forall X. yellow(X)\"
edge u_1 u_2 0 \"exists X. blue(X)\"
edge u_2 u_acc 0 \"goal\"
";

fn form(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_form"))
        .args(args)
        .current_dir(dir)
        .env("FORM_LOG", "error")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn unknown_task_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = form(&["run", "--task", "no-such-task", "--episodes", "10"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown task"));
    assert_eq!(code(&form(&["gen-traces", "--task", "nope", "--out", "t"], dir.path())), 2);
    assert_eq!(code(&form(&["run", "--task", "all-yellow-2", "--seeds", "x"], dir.path())), 2);
}

#[test]
fn validate_reference_and_broken_machines() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("fig2b.form"), FIG2B).unwrap();
    let o = form(&["validate", "fig2b.form"], dir.path());
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let broken = FIG2B.replace(
        "edge u_1 u_2 0 \"exists X. blue(X)\"",
        "edge u_1 u_2 0 \"exists X. blue(X)\"\nedge u_1 u_acc 0 \"blue(o4)\"",
    );
    std::fs::write(dir.path().join("broken.form"), broken).unwrap();
    let o = form(&["validate", "broken.form"], dir.path());
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("u_2") && out.contains("u_acc"), "{out}");

    std::fs::write(dir.path().join("garbage.form"), "state\n").unwrap();
    assert_eq!(code(&form(&["validate", "garbage.form"], dir.path())), 1);
}

#[test]
fn simulate_and_export() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("fig2b.form"), FIG2B).unwrap();
    std::fs::write(dir.path().join("t.traces"), "GOAL;yellow(o0)|yellow(o1)|blue(o4)|goal\nINCOMPLETE;goal\n").unwrap();
    let o = form(&["simulate", "fig2b.form", "t.traces"], dir.path());
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.contains("u_I,u_1,u_2,u_acc reward 1"), "{out}");
    assert!(out.contains("[INCOMPLETE]: u_I reward 0"), "{out}");

    let o = form(&["export-dot", "fig2b.form"], dir.path());
    let dot = stdout(&o);
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.matches("label=").count(), 3, "{dot}");
}

#[test]
fn generate_learn_validate() {
    let dir = tempfile::tempdir().unwrap();
    let o = form(
        &["gen-traces", "--task", "all-yellow-2", "--count", "60", "--out", "ay.traces", "--signature-out", "ay.sig"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("GOAL: 30"));
    let o = form(&["learn", "--traces", "ay.traces", "--signature", "ay.sig", "--out", "ay.form"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(report.contains("states: 2"), "{report}");
    assert!(report.contains("first-order") && report.contains("propositional"));
    assert_eq!(code(&form(&["validate", "ay.form"], dir.path())), 0);

    let o = form(&["learn", "--traces", "ay.traces", "--task", "all-yellow-2", "--mode", "propositional"], dir.path());
    assert_eq!(code(&o), 0);
    let states = stdout(&o).lines().filter(|l| l.starts_with("state ")).count();
    assert!(states >= 4, "{}", stdout(&o));
}

#[test]
fn unsat_and_timeout_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.traces"), "GOAL;goal\nINCOMPLETE;goal\n").unwrap();
    let o = form(&["learn", "--traces", "c.traces", "--task", "all-yellow-2"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));

    let o = form(&["gen-traces", "--task", "blue-allyellow-7", "--count", "60", "--out", "b.traces"], dir.path());
    assert_eq!(code(&o), 0);
    let o = form(
        &["learn", "--traces", "b.traces", "--task", "blue-allyellow-7", "--mode", "propositional", "--budget-learner", "0.3"],
        dir.path(),
    );
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn run_writes_reproducible_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &'static str| ["run", "--task", "all-yellow-2", "--mode", "fixed", "--seeds", "0..4", "--episodes", "300", "--out", out];
    assert_eq!(code(&form(&args("a"), dir.path())), 0);
    assert_eq!(code(&form(&args("b"), dir.path())), 0);
    let a = std::fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert!(lines[0].starts_with("run_id,seed,iteration,episodes,mean_return,success_rate,machine_version,learner_time_ms"));
    // Three iterations of 100 episodes, five seeds each.
    assert_eq!(lines.len(), 1 + 3 * 5);
    assert!(lines[1..6].iter().all(|l| l.split(',').nth(2) == Some("0")));
    assert!(dir.path().join("a/config.toml").exists());
    for seed in 0..5 {
        let m = format!("a/machines/seed{seed}_v0.form");
        assert_eq!(code(&form(&["validate", &m], dir.path())), 0);
    }
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exp.toml"),
        "task = \"all-yellow-2\"\nmode = \"no-machine\"\nseeds = [3]\nepisodes = 200\n[rl]\nalpha = 0.2\n",
    )
    .unwrap();
    let o = form(&["run", "--config", "exp.toml", "--episodes", "100", "--out", "r"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("r/metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with("all-yellow-2-no-machine,3,0,100,"));
    let saved = std::fs::read_to_string(dir.path().join("r/config.toml")).unwrap();
    assert!(saved.contains("episodes = 100") && saved.contains("alpha = 0.2"), "{saved}");

    std::fs::write(dir.path().join("bad.toml"), "tsak = 1\n").unwrap();
    assert_eq!(code(&form(&["run", "--config", "bad.toml"], dir.path())), 2);
}

#[test]
fn learned_runs_flag_learner_timeouts_and_save_valid_machines() {
    let dir = tempfile::tempdir().unwrap();
    let o = form(
        &[
            "run", "--task", "blue-allyellow-7", "--mode", "learn-prop", "--budget-learner", "0.2", "--episodes", "1000",
            "--seeds", "0", "--out", "p",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("p/metrics.csv")).unwrap();
    let timeouts: usize = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert!(timeouts > 0, "{csv}");
    assert!(stdout(&o).contains("learner TIMEOUT"));
    for entry in std::fs::read_dir(dir.path().join("p/machines")).unwrap() {
        let path = entry.unwrap().path();
        assert_eq!(code(&form(&["validate", path.to_str().unwrap()], dir.path())), 0);
    }
}

#[test]
fn transfer_runs() {
    let dir = tempfile::tempdir().unwrap();
    let o = form(
        &["run", "--task", "all-yellow-4", "--transfer-from", "all-yellow-2", "--episodes", "200", "--out", "t"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(dir.path().join("t/metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("all-yellow-4-from-all-yellow-2,0,"));
    let o = form(
        &["run", "--task", "all-yellow-4", "--transfer-from", "all-yellow-2", "--retrain", "nope", "--episodes", "100", "--out", "t2"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}
