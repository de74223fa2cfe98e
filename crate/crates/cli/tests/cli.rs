use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ltosr_core::config::CONFIG_KEYS;

fn ltosr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ltosr"))
        .current_dir(dir)
        .env_remove("LTOSR_DATA_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = "epochs = 2\nsynth_max_count = 120\nsynth_test_per_class = 20\n";

#[test]
fn etf_check_passes_for_128_by_7() {
    let dir = tempfile::tempdir().unwrap();
    let o = ltosr(dir.path(), &["etf-check", "--dim", "128", "--classes", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("max_norm_deviation") && text.contains("max_angle_deviation"));
}

#[test]
fn etf_check_rejects_impossible_shape() {
    let dir = tempfile::tempdir().unwrap();
    let o = ltosr(dir.path(), &["etf-check", "--dim", "3", "--classes", "7"]);
    assert!(!o.status.success());
}

#[test]
fn help_documents_every_config_key() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["make-split", "synth-data", "train", "eval"] {
        let o = ltosr(dir.path(), &[sub, "--help"]);
        assert!(o.status.success(), "{sub}");
        let text = String::from_utf8_lossy(&o.stdout);
        for (key, _) in CONFIG_KEYS {
            assert!(text.contains(key), "{sub} --help lacks {key}");
        }
    }
    for sub in ["etf-check", "report"] {
        assert!(ltosr(dir.path(), &[sub, "--help"]).status.success(), "{sub}");
    }
}

#[test]
fn unknown_subcommand_has_no_side_effects() {
    let dir = tempfile::tempdir().unwrap();
    let o = ltosr(dir.path(), &["fly", "--out", "x"]);
    assert!(!o.status.success());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn invalid_config_lists_every_offending_key() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "bogus = 1\nlr = \"fast\"\n").unwrap();
    let o = ltosr(dir.path(), &["train", "--config", "c.toml", "--out", "run"]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("bogus") && err.contains("lr"), "{err}");
    assert!(!dir.path().join("run").exists());
}

#[test]
fn missing_dataset_file_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let o = ltosr(dir.path(), &["make-split", "--dataset", "nope.npz", "--out", "s"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.npz"));
}

#[test]
fn train_twice_gives_identical_metrics_and_stays_in_out() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    for out in ["a", "b"] {
        let o = ltosr(dir.path(), &["train", "--config", "c.toml", "--out", out, "--seed", "3"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = fs::read(dir.path().join("a/metrics.csv")).unwrap();
    let b = fs::read(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(a, b);
    assert!(String::from_utf8_lossy(&a).starts_with("# seed=3 config_hash="));
    let mut entries: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    entries.sort();
    assert_eq!(entries, ["a", "b", "c.toml"]);
    for f in ["manifest.json", "run_record.json", "checkpoint.npz", "best.npz", "report/report.json", "report/confusion.csv"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn eval_names_class_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = ltosr(dir.path(), &["train", "--config", "c.toml", "--out", "run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ltosr(dir.path(), &["eval", "--checkpoint", "run/best.npz", "--out", "ev"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ltosr(
        dir.path(),
        &["make-split", "--config", "c.toml", "--seen-classes", "0,1,2", "--out", "three"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ltosr(
        dir.path(),
        &["eval", "--checkpoint", "run/best.npz", "--manifest", "three/manifest.json", "--out", "ev3"],
    );
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("K=5") && err.contains("3 seen classes"), "{err}");
}

#[test]
fn interrupted_run_resumes_to_the_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL.replace("epochs = 2", "epochs = 3")).unwrap();
    let o = ltosr(dir.path(), &["train", "--config", "c.toml", "--out", "full"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ltosr(dir.path(), &["train", "--config", "c.toml", "--out", "part", "--max-epochs", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = ltosr(
        dir.path(),
        &["train", "--config", "c.toml", "--out", "rest", "--resume", "part/checkpoint.npz"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read(dir.path().join("full/metrics.csv")).unwrap(),
        fs::read(dir.path().join("rest/metrics.csv")).unwrap()
    );
}

#[test]
fn synth_data_roundtrips_through_training() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    let o = ltosr(dir.path(), &["synth-data", "--config", "c.toml", "--out", "data"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = Command::new(env!("CARGO_BIN_EXE_ltosr"))
        .current_dir(dir.path())
        .env("LTOSR_DATA_ROOT", dir.path().join("data"))
        .args(["make-split", "--config", "c.toml", "--dataset", "synthetic.npz", "--out", "s"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn report_summarizes_runs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), SMALL).unwrap();
    assert!(ltosr(dir.path(), &["train", "--config", "c.toml", "--out", "r1"]).status.success());
    let o = ltosr(dir.path(), &["report", "--runs", "r1", "--out", "sum"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("sum/summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
}
