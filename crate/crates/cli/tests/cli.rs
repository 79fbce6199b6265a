use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn sessrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sessrec"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn clicks(rows: &[(u32, &str, &str)]) -> String {
    rows.iter()
        .map(|(s, t, i)| format!("{s},{t},{i},0\n"))
        .collect()
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["gen-data", "--n-items", "30", "--n-sessions", "300", "--seed", "5"];
    ok(sessrec(dir.path(), &[&["--out", "a"][..], &args].concat()));
    ok(sessrec(dir.path(), &[&["--out", "b"][..], &args].concat()));
    let a = fs::read(dir.path().join("a/clicks.csv")).unwrap();
    let b = fs::read(dir.path().join("b/clicks.csv")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    let cfg = fs::read_to_string(dir.path().join("a/run_config.txt")).unwrap();
    assert!(cfg.contains("seed=5\n") && cfg.contains("n_items=30\n"), "{cfg}");
}

#[test]
fn prepare_counts_prefixes_of_one_session() {
    let dir = tempfile::tempdir().unwrap();
    let data = clicks(&[
        (1, "2014-04-01T10:00:00Z", "i1"),
        (1, "2014-04-01T10:01:00Z", "i2"),
        (1, "2014-04-01T10:02:00Z", "i3"),
        (1, "2014-04-01T10:03:00Z", "i4"),
    ]);
    fs::write(dir.path().join("clicks.csv"), data).unwrap();
    let o = ok(sessrec(
        dir.path(),
        &["prepare", "--data", "clicks.csv", "--split", "none", "--min-item-support", "1", "--dump-examples"],
    ));
    let text = stdout(&o);
    assert!(text.contains("3 training sequences"), "{text}");
    assert!(text.contains("4 items"), "{text}");
    let examples = fs::read_to_string(dir.path().join("out/examples.txt")).unwrap();
    assert_eq!(examples.lines().count(), 3);
}

#[test]
fn spop_report_matches_hand_computation() {
    let dir = tempfile::tempdir().unwrap();
    // Popularity on day one: C 5, A 4, B 3, D 2.
    let mut rows = Vec::new();
    let train: [&[&str]; 5] = [&["C", "A", "B"], &["C", "A", "B"], &["C", "A", "B"], &["C", "A", "D"], &["C", "D"]];
    let stamps: Vec<String> = (0..20).map(|m| format!("2014-04-01T10:{m:02}:00Z")).collect();
    let mut n = 0;
    for (s, items) in train.iter().enumerate() {
        for it in items.iter() {
            rows.push((s as u32 + 1, stamps[n].as_str(), *it));
            n += 1;
        }
    }
    rows.push((9, "2014-04-02T09:00:00Z", "C"));
    rows.push((9, "2014-04-02T09:01:00Z", "A"));
    rows.push((9, "2014-04-02T09:02:00Z", "B"));
    fs::write(dir.path().join("clicks.csv"), clicks(&rows)).unwrap();
    fs::write(dir.path().join("run.cfg"), "data=clicks.csv\nmin_item_support=1\n").unwrap();

    let o = ok(sessrec(dir.path(), &["--config", "run.cfg", "evaluate", "--model", "spop"]));
    // [C] -> A at rank 2, [C, A] -> B at rank 3.
    let report = fs::read_to_string(dir.path().join("out/eval_report.txt")).unwrap();
    assert_eq!(stdout(&o), report);
    let get = |key: &str| {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .unwrap_or_else(|| panic!("{key} missing in {report}"))
            .to_string()
    };
    assert_eq!(get("recall_at_20"), "1");
    assert_eq!(get("mrr_at_20"), (5.0f64 / 12.0).to_string());
    assert_eq!(get("events"), "2");
    assert_eq!(get("degenerate_predictions"), "0");
}

#[test]
fn unknown_config_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.cfg"), "seed=1\nlearnin_rate=0.1\n").unwrap();
    let o = sessrec(dir.path(), &["--config", "run.cfg", "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learnin_rate"));
    assert!(!dir.path().join("out/clicks.csv").exists());

    let o = sessrec(dir.path(), &["--set", "nope=3", "gen-data"]);
    assert_eq!(o.status.code(), Some(1));
    let o = sessrec(dir.path(), &["no-such-command"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_checkpoint_and_missing_data_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ckpt"), "not a checkpoint\n").unwrap();
    assert_eq!(sessrec(dir.path(), &["inspect", "bad.ckpt"]).status.code(), Some(2));
    assert_eq!(sessrec(dir.path(), &["inspect", "missing.ckpt"]).status.code(), Some(2));
    let o = sessrec(dir.path(), &["prepare", "--data", "missing.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_inspect_evaluate_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let small = ["--set", "embed_dim=8", "--set", "gru_units=8", "--set", "max_epochs=1", "--seed", "3"];
    ok(sessrec(
        dir.path(),
        &[&small[..], &["gen-data", "--n-items", "40", "--n-sessions", "600"]].concat(),
    ));
    let data = ["--data", "out/clicks.csv"];
    ok(sessrec(dir.path(), &[&small[..], &["--out", "m1", "train"], &data].concat()));
    let first = fs::read(dir.path().join("m1/model.ckpt")).unwrap();
    let report = fs::read_to_string(dir.path().join("m1/train_report.txt")).unwrap();
    assert!(report.contains("best_epoch="), "{report}");

    ok(sessrec(dir.path(), &[&small[..], &["--out", "again", "train"], &data].concat()));
    assert_eq!(first, fs::read(dir.path().join("again/model.ckpt")).unwrap());
    assert_eq!(report, fs::read_to_string(dir.path().join("again/train_report.txt")).unwrap());

    let o = ok(sessrec(dir.path(), &["inspect", "m1/model.ckpt"]));
    let text = stdout(&o);
    assert!(text.starts_with("SRNLAB1\n"), "{text}");
    assert!(text.contains("gru_units=8"), "{text}");

    let o = ok(sessrec(
        dir.path(),
        &[&small[..], &["--out", "m1", "evaluate", "--model", "m1/model.ckpt"], &data].concat(),
    ));
    assert!(stdout(&o).contains("recall_at_20="));

    // The checkpoint's vocabulary must match the one rebuilt from the data.
    ok(sessrec(
        dir.path(),
        &[&small[..], &["--out", "other", "gen-data", "--n-items", "25", "--n-sessions", "600"]].concat(),
    ));
    let o = sessrec(
        dir.path(),
        &[&small[..], &["evaluate", "--model", "m1/model.ckpt", "--data", "other/clicks.csv"]].concat(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("vocab_size_with_pad"));
}
