use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rubbing_core::synthetic::write_toy_dataset;

fn rubbinggan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rubbinggan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

fn font() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/DejaVuSans.ttf")
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    write_toy_dataset(&root.join("data"), 4, 3, 2, 16).unwrap();
    let config = root.join("run.toml");
    std::fs::write(
        &config,
        "dataset_root = \"data\"\noutput_dir = \"out\"\n\n[train]\nimage_size = 16\n\n[train.widths]\n\
         generator_base = 4\ngenerator_max = 8\npatch_base = 4\nautoencoder_base = 4\nembedding_dim = 8\n",
    )
    .unwrap();
    Fixture {
        _dir: dir,
        root,
        config: config.to_string_lossy().into_owned(),
    }
}

#[test]
fn prepare_prints_counts_and_is_idempotent() {
    let f = fixture();
    let out = rubbinggan(&["prepare", "--config", &f.config]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(text(&out.stdout).trim(), "train=4 test=3 incomplete=2");
    let manifest = f.root.join("out/manifests/train.json");
    let first = std::fs::read(&manifest).unwrap();
    assert!(rubbinggan(&["prepare", "--config", &f.config]).status.success());
    assert_eq!(std::fs::read(&manifest).unwrap(), first);
}

#[test]
fn prepare_fails_on_missing_root() {
    let f = fixture();
    let missing = f.root.join("absent");
    let out = rubbinggan(&["prepare", "--dataset-root", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("absent"));
}

#[test]
fn prepare_lists_malformed_images() {
    let f = fixture();
    std::fs::write(f.root.join("data/train/zz_bad.png"), b"junk").unwrap();
    std::fs::write(f.root.join("data/test/yy_bad.png"), b"junk").unwrap();
    let out = rubbinggan(&["prepare", "--config", &f.config]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("zz_bad.png") && err.contains("yy_bad.png"), "{err}");
}

#[test]
fn train_resume_continues_counter_and_log() {
    let f = fixture();
    let out = rubbinggan(&["train", "--config", &f.config, "--iterations", "5"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let log_path = f.root.join("out/train_log.csv");
    assert_eq!(std::fs::read_to_string(&log_path).unwrap().lines().count(), 6);

    let ckpt = f.root.join("out/checkpoints/ckpt_000005.rgck");
    let out = rubbinggan(&["train", "--config", &f.config, "--iterations", "8", "--resume", ckpt.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let mut reader = csv::Reader::from_path(&log_path).unwrap();
    let iters: Vec<u64> = reader
        .records()
        .map(|r| r.unwrap()[0].parse().unwrap())
        .collect();
    assert_eq!(iters, (1..=8).collect::<Vec<_>>());
    assert!(f.root.join("out/checkpoints/ckpt_000008.rgck").is_file());

    let out = rubbinggan(&["train", "--config", &f.config, "--resume", ckpt.to_str().unwrap(), "--image-size", "32"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_requires_a_checkpoint() {
    let f = fixture();
    let out = rubbinggan(&["eval", "--config", &f.config]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("checkpoint"));
}

#[test]
fn eval_report_has_rows_and_mean() {
    let f = fixture();
    assert!(rubbinggan(&["train", "--config", &f.config, "--iterations", "1"]).status.success());
    let out = rubbinggan(&["eval", "--config", &f.config]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let mut reader = csv::Reader::from_path(f.root.join("out/eval/report.csv")).unwrap();
    let rows: Vec<(String, f64)> = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 4);
    let (mean_row, data) = rows.split_last().unwrap();
    assert_eq!(mean_row.0, "mean");
    let mean = data.iter().map(|r| r.1).sum::<f64>() / 3.0;
    assert!((mean - mean_row.1).abs() < 1e-12);
    assert_eq!(std::fs::read_dir(f.root.join("out/eval/generated")).unwrap().count(), 3);
}

#[test]
fn restore_exit_codes() {
    let f = fixture();
    assert!(rubbinggan(&["train", "--config", &f.config, "--iterations", "1"]).status.success());

    let empty = f.root.join("empty.csv");
    std::fs::write(&empty, "id,incomplete,label\n").unwrap();
    let out = rubbinggan(&["restore", "--config", &f.config, "--requests", empty.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    assert!(text(&out.stdout).contains("0 restored"));

    let out = rubbinggan(&["restore", "--config", &f.config, "--font", "/no/such/font.ttf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(text(&out.stderr).contains("reference glyph image"));

    let reqs = f.root.join("reqs.json");
    std::fs::write(
        &reqs,
        r#"[{"id":"good","incomplete":"data/incomplete/inc000.png","label":"A"},
            {"id":"bad","incomplete":"data/incomplete/inc001.png","label":"U+5F20"}]"#,
    )
    .unwrap();
    let out = rubbinggan(&[
        "restore",
        "--config",
        &f.config,
        "--requests",
        reqs.to_str().unwrap(),
        "--font",
        font().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("1 restored, 1 failed"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.root.join("out/restored/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failures"][0]["id"], "bad");
}

#[test]
fn help_and_unknown_flags() {
    for cmd in ["prepare", "train", "eval", "restore"] {
        let out = rubbinggan(&[cmd, "--help"]);
        assert!(out.status.success());
        let help = text(&out.stdout);
        assert!(help.contains("--config") && help.contains("--output-dir"), "{cmd}: {help}");
    }
    let help = text(&rubbinggan(&["train", "--help"]).stdout);
    for flag in ["--iterations", "--seed", "--image-size", "--resume"] {
        assert!(help.contains(flag), "{flag}");
    }
    assert!(!rubbinggan(&["train", "--iteratons", "5"]).status.success());
}

#[test]
fn unknown_config_key_is_fatal() {
    let f = fixture();
    let cfg = f.root.join("typo.toml");
    std::fs::write(&cfg, "[train]\nlearning_rat = 0.1\n").unwrap();
    let out = rubbinggan(&["prepare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("learning_rat"));
}
