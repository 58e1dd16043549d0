mod common;

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_factormix");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn exit_codes_follow_error_categories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["train", "--k", "1", "--out-dir", s(&out)])), 2);
    assert_eq!(code(&run(&["train", "--lambda", "0.5", "--out-dir", s(&out)])), 2);
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "unknown_key = 1\n").unwrap();
    let o = run(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_key"));

    let missing = dir.path().join("none.ffds");
    assert_eq!(code(&run(&["train", "--dataset", s(&missing), "--out-dir", s(&out)])), 5);
    let junk = dir.path().join("junk.ffds");
    std::fs::write(&junk, b"FFDS\x01\x00garbage").unwrap();
    assert_eq!(code(&run(&["train", "--dataset", s(&junk), "--out-dir", s(&out)])), 3);

    assert_ne!(code(&run(&["no-such-verb"])), 0);
}

#[test]
fn gen_data_then_small_training_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.ffds");
    let o = run(&["gen-data", "--out", s(&data), "--counts", "6,8,6,4", "--seed", "3"]);
    assert_eq!(code(&o), 0);
    let ds = factormix::dataset::load_dataset(&data).unwrap();
    assert_eq!(ds.class_counts(), vec![6, 8, 6, 4]);

    let out = dir.path().join("run");
    let o = run(&[
        "train", "--dataset", s(&data), "--out-dir", s(&out), "--epochs-step1", "1", "--epochs-step2", "1",
        "--views-per-epoch", "1", "--step2-batch-size", "8", "--k", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("baseline") && stdout.contains("proposed"));
    let cfg = factormix::harness::RunConfig::load(out.join("config.toml")).unwrap();
    assert_eq!((cfg.k, cfg.epochs_step1), (2, 1));

    let ck = out.join("fold1/proposed.ffck");
    let o = run(&["evaluate", "--checkpoint", s(&ck), "--dataset", s(&data)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("accuracy "));

    let syn = dir.path().join("syn.ffds");
    let o = run(&[
        "synthesize", "--checkpoint", s(&out.join("fold0/disentangle.ffck")), "--dataset", s(&data), "--out", s(&syn),
        "--count", "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let syn = factormix::dataset::load_dataset(&syn).unwrap();
    assert_eq!(syn.len(), 5);
    assert!(syn.samples.iter().all(|x| (x.target.probs().iter().sum::<f64>() - 1.0).abs() < 1e-6));

    let other = generate_other(dir.path());
    assert_eq!(code(&run(&["evaluate", "--checkpoint", s(&ck), "--dataset", s(&other)])), 2);

    let again = dir.path().join("again");
    let o = run(&["report", "--results", s(&out.join("results.json")), "--out", s(&again)]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(out.join("report.md")).unwrap(), std::fs::read(again.join("report.md")).unwrap());
}

fn generate_other(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("big.ffds");
    assert_eq!(code(&run(&["gen-data", "--out", s(&p), "--counts", "2,2", "--image-size", "48"])), 0);
    p
}

#[test]
fn equal_config_and_seed_give_identical_artifacts() {
    let files = common::cli_runs_identical(BIN, common::SMALL_RUN_TOML).unwrap();
    assert!(files.len() >= 13, "{files:?}");
}
