use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use podq::evalkit::{parse_trace, EvalReport};
use podq::qnet::{argmax, NetworkWeights};
use podq::tensor::checkpoint::Container;

fn podq(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_podq"))
        .args(args)
        .current_dir(cwd)
        .env_remove("PODQ_RUNS_DIR")
        .output()
        .expect("spawn podq")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr_of(args: &[&str], cwd: &Path) -> String {
    stderr(&podq(args, cwd))
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &[&str] = &[
    "--override",
    "training.prefill_steps=200",
    "--override",
    "eval.episodes=10",
    "--override",
    "eval.repeats=2",
    "--quiet",
];

fn train(cwd: &Path, out: &str, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--out", out];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    ok(&podq(&args, cwd));
    cwd.join(out)
}

#[test]
fn missing_config_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let out = podq(&["train", "--config", "no-such.toml"], tmp.path());
    assert!(!out.status.success());
    assert!(stderr(&out).contains("no-such.toml"), "{}", stderr(&out));
}

#[test]
fn bad_keys_are_usage_errors_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let out = podq(&["train", "--override", "training.gama=0.5"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("gama"));
    let out = podq(
        &["train", "--override", "mission.rewards.wins=1"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("wins"));
    let out = podq(&["train", "--arch", "transformer"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("architecture"));
    let out = podq(&["frobnicate"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn smoke_run_writes_manifest_and_metrics_without_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(
        tmp.path(),
        "run",
        &[
            "--episodes",
            "10",
            "--override",
            "training.metrics_window=5",
        ],
    );
    assert!(dir.join("manifest.json").exists());
    assert!(dir.join("config.toml").exists());
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let episodes = std::fs::read_to_string(dir.join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 11);
    assert!(!dir.join("checkpoints").exists());

    // the run cannot be silently overwritten
    let again = podq(&["train", "--out", "run", "--episodes", "10"], tmp.path());
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr(&again).contains("--resume"));
    // a resumed run must match the recorded config
    let mut args = vec!["train", "--out", "run", "--resume", "--episodes", "10"];
    args.extend_from_slice(SMALL);
    let changed = podq(&args, tmp.path());
    assert_eq!(changed.status.code(), Some(2));
    assert!(
        stderr(&changed).contains("training.metrics_window"),
        "{}",
        stderr(&changed)
    );
    args.extend_from_slice(&["--override", "training.metrics_window=5"]);
    assert!(ok(&podq(&args, tmp.path())).contains("already complete"));
}

#[test]
fn runs_default_under_the_runs_root() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = vec![
        "train",
        "--episodes",
        "2",
        "--seed",
        "4",
        "--mission",
        "cliff",
    ];
    args.extend_from_slice(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_podq"))
        .args(&args)
        .current_dir(tmp.path())
        .env("PODQ_RUNS_DIR", tmp.path().join("root"))
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp
        .path()
        .join("root/cliff-walking-stacked-dqn-s4/manifest.json")
        .exists());
}

#[test]
fn identical_seeds_give_identical_artefacts() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = [
        "--episodes",
        "12",
        "--override",
        "training.checkpoints=[6,12]",
        "--override",
        "training.metrics_window=4",
        "--arch",
        "drqn",
    ];
    let a = train(tmp.path(), "a", &extra);
    let b = train(tmp.path(), "b", &extra);
    for f in [
        "metrics.csv",
        "episodes.csv",
        "config.toml",
        "checkpoints/ep-000006.podq",
        "checkpoints/ep-000012.podq",
        "eval/ep-000012.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    // the manifest alone reproduces the run
    let c = train(
        tmp.path(),
        "c",
        &["--config", a.join("config.toml").to_str().unwrap()],
    );
    assert_eq!(
        std::fs::read(a.join("metrics.csv")).unwrap(),
        std::fs::read(c.join("metrics.csv")).unwrap()
    );
}

#[test]
fn eval_defaults_to_three_by_hundred_and_rejects_bad_files() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(
        tmp.path(),
        "run",
        &["--episodes", "3", "--override", "training.checkpoints=[3]"],
    );
    let ck = dir.join("checkpoints/ep-000003.podq");
    let ck = ck.to_str().unwrap();

    let report: EvalReport = serde_json::from_str(&ok(&podq(&["eval", ck], tmp.path()))).unwrap();
    assert_eq!(report.repeats.len(), 3);
    assert_eq!(report.episodes, 100);
    let mean = report.repeats.iter().map(|r| r.win_pct).sum::<f64>() / 3.0;
    assert!((report.mean_win_pct - mean).abs() < 1e-9);

    let args = [
        "eval",
        ck,
        "--repeats",
        "1",
        "--episodes",
        "5",
        "--out",
        "r.json",
    ];
    let report: EvalReport = serde_json::from_str(&ok(&podq(&args, tmp.path()))).unwrap();
    assert_eq!(report.repeats.len(), 1);
    assert_eq!(report.episodes, 5);
    let again: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(again, report);

    let bytes = std::fs::read(ck).unwrap();
    std::fs::write(tmp.path().join("short.podq"), &bytes[..bytes.len() / 2]).unwrap();
    let out = podq(&["eval", "short.podq"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("short.podq"));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    std::fs::write(tmp.path().join("magic.podq"), bad).unwrap();
    assert_eq!(
        podq(&["eval", "magic.podq"], tmp.path()).status.code(),
        Some(3)
    );
    let mut bad = bytes;
    bad[4] = 9;
    std::fs::write(tmp.path().join("version.podq"), bad).unwrap();
    let out = podq(&["eval", "version.podq"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("version"));

    // a checkpoint cannot be run at another frame size
    let out = podq(
        &["eval", ck, "--override", "mission.resolution=40"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn inspect_trace_is_consistent_and_replayable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = train(
        tmp.path(),
        "run",
        &[
            "--episodes",
            "2",
            "--arch",
            "simple-dqn",
            "--override",
            "training.checkpoints=[2]",
        ],
    );
    let ck = dir.join("checkpoints/ep-000002.podq");
    let ck = ck.to_str().unwrap();
    let args = ["inspect", ck, "--episodes", "1", "--seed", "3"];
    let text = ok(&podq(&args, tmp.path()));
    let trace = parse_trace(&text).unwrap();
    assert!(!trace.is_empty());
    assert_eq!(text, ok(&podq(&args, tmp.path())));
    assert!(trace.iter().enumerate().all(|(i, e)| e.step as usize == i));

    let container = Container::read_from(std::fs::File::open(ck).unwrap()).unwrap();
    let net = NetworkWeights::from_container(&container).unwrap();
    for e in &trace {
        assert_eq!(e.action.index(), argmax(&e.q));
        let (q, _) = net.q_values(&e.frame, None).unwrap();
        assert_eq!(q.data(), &e.q[..]);
    }
    assert!(stderr_of(&args, tmp.path()).contains(&format!("({} lines)", trace.len())));

    ok(&podq(
        &[
            "inspect",
            ck,
            "--episodes",
            "1",
            "--seed",
            "3",
            "--out",
            "t.txt",
        ],
        tmp.path(),
    ));
    ok(&podq(
        &[
            "inspect",
            ck,
            "--episodes",
            "1",
            "--seed",
            "3",
            "--out",
            "t.txt",
        ],
        tmp.path(),
    ));
    let appended = std::fs::read_to_string(tmp.path().join("t.txt")).unwrap();
    assert_eq!(appended, text.repeat(2));
}

#[test]
fn oracle_reports_optima_and_tabular_wins() {
    let tmp = tempfile::tempdir().unwrap();
    let cliff = ok(&podq(
        &[
            "oracle",
            "--mission",
            "cliff-walking",
            "--episodes",
            "50000",
        ],
        tmp.path(),
    ));
    assert!(cliff.contains("distinct bfs optima [8]"), "{cliff}");
    assert!(cliff.contains("tabular greedy win rate 100.0%"));
    let basic = ok(&podq(&["oracle", "--mission", "basic"], tmp.path()));
    assert!(basic.contains("spawns 49"), "{basic}");
    assert!(basic.contains("tabular greedy win rate 100.0%"));
    assert!(basic.contains("tabular greedy optimal on 49 of 49 spawns"));
    let cue = ok(&podq(
        &["oracle", "--mission", "cue-corridor", "--episodes", "20000"],
        tmp.path(),
    ));
    assert!(cue.contains("memoryless ceiling 50.0%"), "{cue}");
}

#[test]
fn compare_tabulates_runs_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let extra = [
        "--episodes",
        "4",
        "--override",
        "training.checkpoints=[2,4]",
    ];
    train(tmp.path(), "a", &extra);
    let mut simple = extra.to_vec();
    simple.extend_from_slice(&["--arch", "simple-dqn"]);
    train(tmp.path(), "b", &simple);
    copy_dir(&tmp.path().join("a"), &tmp.path().join("c"));

    let csv = ok(&podq(
        &["compare", "b", "a", "c", "--out", "t.csv"],
        tmp.path(),
    ));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(
        rows[0],
        "variant,ep-000002_win_pct,ep-000002_steps_per_win,ep-000004_win_pct,ep-000004_steps_per_win"
    );
    assert!(rows[1].starts_with("simple-dqn,"));
    assert!(rows[2].starts_with("stacked-dqn,"));
    assert_eq!(rows[2], rows[3]);
    assert!(rows.iter().all(|r| r.split(',').count() == 1 + 2 * 2));
    assert_eq!(
        std::fs::read_to_string(tmp.path().join("t.csv")).unwrap(),
        csv
    );

    std::fs::remove_file(tmp.path().join("c/eval/ep-000004.json")).unwrap();
    let out = podq(&["compare", "a", "c"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("ep-000004.json"));
    assert_eq!(podq(&["compare", "a"], tmp.path()).status.code(), Some(2));

    // re-evaluating a run restores the report
    ok(&podq(&["eval", "--run", "c"], tmp.path()));
    ok(&podq(&["compare", "a", "c"], tmp.path()));
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}
