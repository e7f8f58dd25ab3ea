use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use riemopt::checkpoint;
use riemopt::config::parse_config;
use riemopt::train::{self, parse_metrics, CHECKPOINT_FILE, METRICS_FILE};

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn riemopt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riemopt")).args(args).output().unwrap()
}

fn train_cli(config: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    riemopt(&args)
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = write(
        dir.path(),
        "a.cfg",
        "task = mlp_classify\ndataset = synthetic(4, 64, 512)\nmodel.hidden = 32, 32\nepochs = 10\n",
    );
    let o = train_cli(&cfg, &["--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let records = parse_metrics(&std::fs::read_to_string(out.join(METRICS_FILE)).unwrap()).unwrap();
    assert_eq!(records.len(), 10);
    assert!(records[9].loss < 0.5 * records[0].loss);
    assert!(records.iter().all(|r| r.constraint_residual <= 1e-6));
    assert!(records.iter().all(|r| r.accuracy.is_some_and(|a| (0.0..=1.0).contains(&a))));

    // Reload the checkpoint into a fresh model and re-evaluate.
    let entries = checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(entries.len(), 6);
    let parsed = parse_config(&cfg).unwrap();
    let loss = train::evaluate_checkpoint(&parsed, &entries).unwrap();
    assert!((loss - records[9].loss).abs() <= 1e-12, "{loss} vs {}", records[9].loss);
}

#[test]
fn checkpoint_round_trip_for_problem_tasks() {
    let dir = tempfile::tempdir().unwrap();
    for (i, text) in [
        "task = rayleigh\nproblem.n = 12\nproblem.p = 3\noptimizer = sgd\noptimizer.lr = 0.01\nepochs = 20\n",
        "task = karcher_mean\nproblem.n = 3\nproblem.k = 4\noptimizer = adagrad\noptimizer.lr = 0.1\nepochs = 20\n",
    ]
    .iter()
    .enumerate()
    {
        let out = dir.path().join(format!("r{i}"));
        let cfg_path = write(dir.path(), &format!("{i}.cfg"), text);
        let mut cfg = parse_config(&cfg_path).unwrap();
        cfg.output_dir = out.clone();
        let outcome = train::run_training(&cfg).unwrap();
        let entries = checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
        let loss = train::evaluate_checkpoint(&cfg, &entries).unwrap();
        let last = outcome.records.last().unwrap();
        assert!((loss - last.loss).abs() <= 1e-12);
        assert!(outcome.records.iter().all(|r| r.constraint_residual <= 1e-6 && r.accuracy.is_none()));
    }
}

#[test]
fn zero_epochs_writes_header_and_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "z.cfg",
        "task = rayleigh\nproblem.n = 6\nproblem.p = 2\nepochs = 0\noutput_dir = zero\n",
    );
    let o = riemopt(&["--seed", "3", "train", "--config", cfg.to_str().unwrap()]);
    assert!(o.status.success());
    // output_dir is relative to the working directory of the process.
    let out = std::env::current_dir().unwrap().join("zero");
    let metrics = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics, "epoch,loss,constraint_residual,accuracy\n");
    let entries = checkpoint::load(&out.join(CHECKPOINT_FILE)).unwrap();
    let mut parsed = parse_config(&cfg).unwrap();
    parsed.seed = 3;
    parsed.output_dir = dir.path().join("again");
    let fresh = train::train(&parsed).unwrap();
    assert_eq!(entries[0].value, *fresh.params[0].value());
    std::fs::remove_dir_all(out).unwrap();
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.cfg", "task = rayleigh\nproblem.n = 8\nproblem.p = 2\nepochs = 3\n");
    let read = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        let o = riemopt(&["train", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        std::fs::read(out.join(METRICS_FILE)).unwrap()
    };
    assert_eq!(read("1", "a"), read("1", "b"));
    assert_ne!(read("1", "c"), read("2", "d"));
}

#[test]
fn csv_dataset_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::new();
    for i in 0..40 {
        let (x, label) = if i % 2 == 0 { (-3.0, 0) } else { (3.0, 1) };
        csv.push_str(&format!("{x},{},{label}\n", (i as f64) * 0.01));
    }
    write(dir.path(), "train.csv", &csv);
    let cfg = write(
        dir.path(),
        "c.cfg",
        "task = mlp_classify\ndataset = train.csv\nmodel.hidden = 4\nmodel.manifold = none, stiefel\nbatch_size = 8\nepochs = 5\n",
    );
    let out = dir.path().join("out");
    let o = train_cli(&cfg, &["--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(parse_metrics(&std::fs::read_to_string(out.join(METRICS_FILE)).unwrap()).unwrap().len(), 5);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let out = out.to_str().unwrap();

    let typo = write(dir.path(), "typo.cfg", "task = rayleigh\nlearning_rat = 0.1\n");
    let o = train_cli(&typo, &["--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rat"));

    let syntax = write(dir.path(), "syntax.cfg", "task = rayleigh\nepochs\n");
    let o = train_cli(&syntax, &["--out", out]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains(":2:"));

    let o = train_cli(&dir.path().join("missing.cfg"), &["--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let bad_label = write(dir.path(), "bad.csv", "1.0,2.0,0\n3.0,4.0,7\n");
    let cfg = write(
        dir.path(),
        "label.cfg",
        &format!("task = mlp_classify\ndataset = {}\nmodel.classes = 3\nbatch_size = 2\n", bad_label.display()),
    );
    let o = train_cli(&cfg, &["--out", out]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("row 2"));

    let o = riemopt(&["check", "--suite", "karcher"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("[PASS]"));
    let o = riemopt(&["check", "--suite", "nope"]);
    assert_eq!(o.status.code(), Some(2));
}
