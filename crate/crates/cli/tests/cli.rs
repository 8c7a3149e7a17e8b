use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tumorseg::unet::{self, UNet, UNetConfig};

const WINDOW: [&str; 4] = ["--window-start", "2", "--window-length", "6"];

fn tumorseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumorseg"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = tumorseg(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn fixtures(cwd: &Path, name: &str, seed: &str) {
    ok(
        &["make-fixtures", "--data-root", name, "--cases", "5", "--fixture-shape", "16x16x10", "--seed", seed],
        cwd,
    );
}

fn train(cwd: &Path, out: &str, extra: &[&str]) {
    let mut args = vec![
        "train", "--data-root", "fx", "--output-dir", out, "--base-features", "2", "--depth", "1",
        "--input-size", "16x16",
    ];
    args.extend(WINDOW);
    args.extend(extra);
    ok(&args, cwd);
}

fn drop_seconds(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map(|(head, _)| head.to_string()).unwrap_or_default())
        .collect()
}

#[test]
fn help_lists_every_flag_of_every_command() {
    let dir = tempfile::tempdir().unwrap();
    let expected: [(&str, &[&str]); 5] = [
        (
            "train",
            &[
                "--config", "--data-root", "--output-dir", "--seed", "--epochs", "--batch-size", "--learning-rate",
                "--base-features", "--depth", "--input-size", "--window-start", "--window-length", "--split-ratios",
                "--patience", "--min-delta", "--monitor", "--record-time",
            ],
        ),
        (
            "evaluate",
            &[
                "--config", "--checkpoint", "--data-root", "--partition", "--decision-mode", "--split-ratios", "--seed",
                "--batch-size", "--window-start", "--window-length", "--output-dir",
            ],
        ),
        ("predict", &["--config", "--checkpoint", "--case-dir", "--output-dir", "--window-start", "--window-length"]),
        ("plot", &["--config", "--csv", "--output-dir"]),
        ("make-fixtures", &["--config", "--data-root", "--cases", "--fixture-shape", "--seed"]),
    ];
    for (command, flags) in expected {
        let help = ok(&[command, "--help"], dir.path());
        for flag in flags {
            assert!(help.contains(flag), "{command} --help lacks {flag}");
        }
    }
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = tumorseg(&["train", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    fs::write(dir.path().join("bad.cfg"), "epochs = 3\nbogus = 1\n").unwrap();
    let out = tumorseg(&["train", "--config", "bad.cfg", "--data-root", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bogus"));
    let out = tumorseg(&["train", "--data-root", "x", "--epochs", "many"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error code=Usage kind=usage"));
}

#[test]
fn missing_data_root_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = tumorseg(&["train", "--data-root", "nowhere/at/all", "--epochs", "1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("code=MissingRoot"), "{err}");
    assert!(err.contains("nowhere/at/all"), "{err}");
}

#[test]
fn config_file_and_flags_train_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fixtures(cwd, "fx", "0");
    fs::write(cwd.join("run.cfg"), "epochs = 3\nseed = 7\nlearning-rate = 0.01\n").unwrap();
    let mut args = vec![
        "train", "--config", "run.cfg", "--data-root", "fx", "--output-dir", "a", "--base-features", "2", "--depth",
        "1", "--input-size", "16x16", "--record-time", "false",
    ];
    args.extend(WINDOW);
    ok(&args, cwd);
    args[6] = "b";
    ok(&args, cwd);
    let a = fs::read_to_string(cwd.join("a/training_log.csv")).unwrap();
    assert_eq!(a.lines().count(), 4);
    assert_eq!(a, fs::read_to_string(cwd.join("b/training_log.csv")).unwrap());

    // Wall-clock timing only changes the last column.
    train(cwd, "c", &["--seed", "7", "--epochs", "3", "--learning-rate", "0.01"]);
    let c = fs::read_to_string(cwd.join("c/training_log.csv")).unwrap();
    assert_eq!(drop_seconds(&a), drop_seconds(&c));

    // The resolved snapshot replays the run.
    let snapshot = fs::read_to_string(cwd.join("a/config.resolved.cfg")).unwrap();
    assert!(snapshot.contains("epochs = 3"));
    fs::write(cwd.join("replay.cfg"), snapshot.replace("output-dir = a", "output-dir = d")).unwrap();
    ok(&["train", "--config", "replay.cfg"], cwd);
    assert_eq!(a, fs::read_to_string(cwd.join("d/training_log.csv")).unwrap());
}

#[test]
fn evaluate_compares_datasets_and_checks_channels() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fixtures(cwd, "fx", "0");
    fixtures(cwd, "other", "100");
    train(cwd, "run", &["--epochs", "2"]);
    let mut args = vec![
        "evaluate", "--checkpoint", "run/best.ckpt", "--data-root", "fx", "--data-root", "other", "--output-dir", "rep",
    ];
    args.extend(WINDOW);
    let stdout = ok(&args, cwd);
    assert!(stdout.contains("fx/test"));
    assert!(stdout.contains("other/test"));
    let csv = fs::read_to_string(cwd.join("rep/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("fx,test,hard,1,6,"));

    let wrong = UNet::new(
        UNetConfig {
            in_channels: 3,
            base_features: 2,
            depth: 1,
            input_size: (16, 16),
            ..UNetConfig::default()
        },
        0,
    )
    .unwrap();
    unet::save_checkpoint(&wrong, &cwd.join("wrong.ckpt")).unwrap();
    args[2] = "wrong.ckpt";
    let out = tumorseg(&args, cwd);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("ShapeMismatch"));

    fs::write(cwd.join("junk.ckpt"), b"junk").unwrap();
    args[2] = "junk.ckpt";
    let out = tumorseg(&args, cwd);
    assert_ne!(out.status.code(), Some(0));
    assert!(stderr(&out).contains("CorruptCheckpoint"));
}

#[test]
fn predict_is_deterministic_and_needs_t1ce() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fixtures(cwd, "fx", "0");
    train(cwd, "run", &["--epochs", "2"]);
    let mut args = vec!["predict", "--checkpoint", "run/last.ckpt", "--case-dir", "fx/Synth_00001", "--output-dir", "p1"];
    args.extend(WINDOW);
    let stdout = ok(&args, cwd);
    assert!(stdout.contains("label 4:"));
    args[6] = "p2";
    ok(&args, cwd);
    let a = fs::read(cwd.join("p1/Synth_00001_pred.nii.gz")).unwrap();
    assert_eq!(a, fs::read(cwd.join("p2/Synth_00001_pred.nii.gz")).unwrap());

    fs::remove_file(cwd.join("fx/Synth_00001/Synth_00001_t1ce.nii.gz")).unwrap();
    let out = tumorseg(&args, cwd);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ModalityMissing"));
}

#[test]
fn plot_draws_single_and_comparison_curves() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    fixtures(cwd, "fx", "0");
    train(cwd, "first", &["--seed", "1", "--epochs", "2"]);
    train(cwd, "second", &["--seed", "2", "--epochs", "2"]);
    ok(&["plot", "--csv", "first/training_log.csv", "--output-dir", "single"], cwd);
    for name in ["loss", "accuracy", "dice"] {
        let svg = fs::read_to_string(cwd.join(format!("single/{name}.svg"))).unwrap();
        assert!(svg.contains(">\ntrain\n<") || svg.contains(">train<"), "{name} lacks train legend");
        assert!(svg.contains("validation"));
    }
    ok(
        &["plot", "--csv", "first/training_log.csv", "--csv", "second/training_log.csv", "--output-dir", "cmp"],
        cwd,
    );
    for name in ["loss", "accuracy", "dice"] {
        let svg = fs::read_to_string(cwd.join(format!("cmp/comparison_{name}.svg"))).unwrap();
        assert!(svg.contains("first") && svg.contains("second"));
        assert!(svg.matches("<polyline").count() >= 2);
    }

    let log = fs::read_to_string(cwd.join("first/training_log.csv")).unwrap();
    fs::write(cwd.join("broken.csv"), log.replace(",val_dice,", ",val_dyce,")).unwrap();
    let out = tumorseg(&["plot", "--csv", "broken.csv", "--output-dir", "x"], cwd);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("val_dice"));
}
