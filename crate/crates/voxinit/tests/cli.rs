//! Drives the installed binary end to end: dataset generation through
//! fine-tuning, evaluation, and inference, plus the exit-code conventions
//! (0 ok, 1 usage/config, 2 data/format, 3 numerical).

use std::path::Path;
use std::process::{Command, Output};

fn voxinit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxinit"))
        .args(args)
        .env_remove("VOXINIT_SEED")
        .output()
        .expect("binary launches")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

#[test]
fn full_workflow_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let pre = dir.path().join("pre");
    let fine = dir.path().join("fine");
    let eval = dir.path().join("eval");
    let data_s = data.to_str().unwrap();

    let out = voxinit(&[
        "gen-data", "--out", data_s, "--n", "5", "--dims", "16,16,16", "--classes", "3",
        "--seed", "11",
    ]);
    assert_ok(&out, "gen-data");
    assert!(data.join("manifest.json").is_file());
    assert!(data.join("sample0000.vvol").is_file());

    let out = voxinit(&[
        "pretrain", "--data", data_s, "--out", pre.to_str().unwrap(), "--epochs", "1",
        "--patch", "4", "--embed", "8", "--levels", "2", "--depth", "2", "--attn-heads", "2",
        "--dec-channels", "4,4", "--heads", "1,2", "--seed", "1",
    ]);
    assert_ok(&out, "pretrain");
    let ckpt = pre.join("pretrained.vwi");
    assert!(ckpt.is_file());
    assert!(pre.join("pretrain_metrics.csv").is_file());
    assert!(stdout(&out).contains("L_total"));

    let out = voxinit(&[
        "finetune", "--data", data_s, "--out", fine.to_str().unwrap(), "--epochs", "2",
        "--val-every", "1", "--init", ckpt.to_str().unwrap(), "--seed", "1",
    ]);
    assert_ok(&out, "finetune");
    let seg_ckpt = fine.join("finetuned.vwi");
    assert!(seg_ckpt.is_file());
    assert!(fine.join("val_dice.csv").is_file());
    assert!(stdout(&out).contains("transferred"), "no transfer report in: {}", stdout(&out));

    let out = voxinit(&[
        "evaluate", "--data", data_s, "--model", seg_ckpt.to_str().unwrap(), "--out",
        eval.to_str().unwrap(),
    ]);
    assert_ok(&out, "evaluate");
    assert!(eval.join("eval.csv").is_file());
    assert!(eval.join("eval.json").is_file());
    assert!(stdout(&out).contains("mean Dice"));

    let pred = dir.path().join("pred.vvol");
    let out = voxinit(&[
        "infer", "--volume", data.join("sample0004.vvol").to_str().unwrap(), "--model",
        seg_ckpt.to_str().unwrap(), "--out", pred.to_str().unwrap(),
    ]);
    assert_ok(&out, "infer");
    assert!(pred.is_file());
    assert!(stdout(&out).contains("voxels per class"));

    // a pretrain checkpoint is not a segmentation model
    let out = voxinit(&[
        "evaluate", "--data", data_s, "--model", ckpt.to_str().unwrap(), "--out",
        eval.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
    assert!(stderr(&out).contains("fine-tune"));

    // a corrupted checkpoint is a data error
    let broken = dir.path().join("broken.vwi");
    std::fs::write(&broken, b"VWI?not a checkpoint").unwrap();
    let out = voxinit(&[
        "evaluate", "--data", data_s, "--model", broken.to_str().unwrap(), "--out",
        eval.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn init_stats_matches_analytic_sigma() {
    let out = voxinit(&[
        "init-stats", "--scheme", "kaiming-normal", "--fan-in", "16", "--samples", "100000",
        "--seed", "5",
    ]);
    assert_ok(&out, "init-stats");
    let text = stdout(&out);
    let std_str = text
        .split("std=")
        .nth(1)
        .and_then(|rest| rest.split_whitespace().next())
        .unwrap_or_else(|| panic!("no std= in: {text}"));
    let std: f64 = std_str.parse().unwrap();
    // gain / sqrt(fan_in) = 1 / 4
    assert!((std - 0.25).abs() <= 0.005, "std {std} vs 0.25");
}

#[test]
fn exit_codes_follow_convention() {
    let out = voxinit(&["--help"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("init-stats"));

    let out = voxinit(&[]);
    assert_eq!(code(&out), 1, "bare invocation should be a usage error");

    let out = voxinit(&["pretrain", "--no-such-flag", "3"]);
    assert_eq!(code(&out), 1);

    let out = voxinit(&["init-stats", "--scheme", "not-a-scheme", "--fan-in", "8"]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));

    // bad --init name is rejected before any data access
    let out = voxinit(&["finetune", "--data", "/nope", "--out", "/tmp/x", "--init", "bogus"]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));

    // a missing dataset directory is a data error, not a usage error
    let dir = tempfile::tempdir().unwrap();
    let out = voxinit(&[
        "evaluate", "--data", dir.path().join("missing").to_str().unwrap(), "--model",
        "/also/missing.vwi", "--out", dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cfg-data");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# generation settings\nout = {}\nn = 5\ndims = 16,16,16\nclasses = 3\nseed = 9\n",
            data.display()
        ),
    )
    .unwrap();

    // --n beats the file's n = 5; everything else comes from the file
    let out = voxinit(&["gen-data", "--config", cfg.to_str().unwrap(), "--n", "2"]);
    assert_ok(&out, "gen-data with config");
    assert!(stdout(&out).contains("wrote 2 volumes"));
    let listed = std::fs::read_dir(&data)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| Path::new(&e.file_name()).extension().is_some_and(|x| x == "vvol"))
        .count();
    assert_eq!(listed, 2);

    // malformed lines are usage errors
    std::fs::write(&cfg, "this line has no equals sign\n").unwrap();
    let out = voxinit(&["gen-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
}
