use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mapfuse::diagnostics::random_image;
use mapfuse::save_image;

fn mapfuse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mapfuse"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `root/X/pNN.png` and `root/Y/pNN.png` for `n` random pairs.
fn pair_dir(root: &Path, n: usize, size: usize) -> PathBuf {
    for side in ["X", "Y"] {
        fs::create_dir_all(root.join(side)).unwrap();
    }
    for i in 0..n {
        let seed = 100 + 2 * i as u64;
        save_image(&random_image(size, size, seed), root.join("X").join(format!("p{i:02}.png"))).unwrap();
        save_image(&random_image(size, size, seed + 1), root.join("Y").join(format!("p{i:02}.png"))).unwrap();
    }
    root.to_path_buf()
}

const TINY: [&str; 8] = ["--crop", "16", "--base-channels", "4", "--batch", "2", "--steps", "2"];

fn train_tiny(dir: &Path) -> PathBuf {
    let data = pair_dir(&dir.join("data"), 3, 16);
    let ckpt = dir.join("net.ckpt");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&ckpt)];
    args.extend(TINY);
    let out = mapfuse(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    ckpt
}

#[test]
fn train_without_data_is_a_usage_error() {
    let out = mapfuse(&["train", "--out", "x.ckpt"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--data"));
}

#[test]
fn train_with_missing_directory_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = mapfuse(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = pair_dir(&dir.path().join("data"), 2, 16);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# tiny run\ncrop=16\ncolour=blue\n").unwrap();
    let out = mapfuse(&["train", "--data", s(&data), "--out", s(&dir.path().join("c")), "--config", s(&cfg)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("colour"));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = pair_dir(&dir.path().join("data"), 2, 16);
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "crop=16\nbase_channels=4\nbatch=2\nsteps=5\n").unwrap();
    let (ckpt, log) = (dir.path().join("c"), dir.path().join("log.csv"));
    let out = mapfuse(&[
        "train", "--data", s(&data), "--out", s(&ckpt), "--log", s(&log), "--config", s(&cfg), "--steps", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&log).unwrap();
    assert_eq!(text.lines().next(), Some("step,loss,frac_x"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn fuse_is_deterministic_and_keeps_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let (x, y) = (dir.path().join("x.png"), dir.path().join("y.png"));
    save_image(&random_image(24, 40, 1), &x).unwrap();
    save_image(&random_image(24, 40, 2), &y).unwrap();

    let fuse = |a: &Path, b: &Path, out: &Path| {
        let o = mapfuse(&["fuse", "--ckpt", s(&ckpt), "--x", s(a), "--y", s(b), "--out", s(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stderr(&o).contains("EN"));
        fs::read(out).unwrap()
    };
    let first = fuse(&x, &y, &dir.path().join("f1.png"));
    let second = fuse(&x, &y, &dir.path().join("f2.png"));
    assert_eq!(first, second);
    let swapped = fuse(&y, &x, &dir.path().join("f3.png"));
    assert_ne!(first, swapped);

    let fused = mapfuse::load_image(dir.path().join("f1.png")).unwrap();
    assert_eq!(fused.dims(), (24, 40));
}

#[test]
fn fuse_rejects_mismatched_sources() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let (x, y) = (dir.path().join("x.png"), dir.path().join("y.png"));
    save_image(&random_image(16, 16, 1), &x).unwrap();
    save_image(&random_image(16, 24, 2), &y).unwrap();
    let out = mapfuse(&["fuse", "--ckpt", s(&ckpt), "--x", s(&x), "--y", s(&y), "--out", s(&dir.path().join("f.png"))]);
    assert_eq!(code(&out), 1);
}

#[test]
fn fuse_rejects_a_garbage_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"not a checkpoint").unwrap();
    let x = dir.path().join("x.png");
    save_image(&random_image(16, 16, 1), &x).unwrap();
    let out = mapfuse(&["fuse", "--ckpt", s(&ckpt), "--x", s(&x), "--y", s(&x), "--out", s(&dir.path().join("f.png"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("checkpoint"));
}

#[test]
fn eval_selected_metrics_and_identity() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    save_image(&random_image(32, 32, 3), &img).unwrap();
    let csv = dir.path().join("m.csv");

    let out = mapfuse(&["eval", "--x", s(&img), "--y", s(&img), "--fused", s(&img), "--metrics", "EN,SD", "--csv", s(&csv)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("EN,SD"));
    assert_eq!(text.lines().nth(1).unwrap().split(',').count(), 2);

    let out = mapfuse(&["eval", "--x", s(&img), "--y", s(&img), "--fused", s(&img), "--metrics", "EN,SD", "--csv", s(&csv)]);
    assert_eq!(code(&out), 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 3, "header written once");

    let full = dir.path().join("full.csv");
    let out = mapfuse(&["eval", "--x", s(&img), "--y", s(&img), "--fused", s(&img), "--csv", s(&full)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(&full).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(header.iter().collect::<Vec<_>>(), ["EI", "CE", "SF", "EN", "Qabf", "MS_SSIM", "SD", "VIF"]);
    let row = reader.records().next().unwrap().unwrap();
    assert_eq!(&row[5], "1.000000");
    assert_eq!(stdout(&out).lines().count(), 2);
}

#[test]
fn eval_unknown_metric_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("a.png");
    save_image(&random_image(16, 16, 3), &img).unwrap();
    let out = mapfuse(&[
        "eval", "--x", s(&img), "--y", s(&img), "--fused", s(&img), "--metrics", "EN,PSNR",
        "--csv", s(&dir.path().join("m.csv")),
    ]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    assert!(err.contains("PSNR") && err.contains("Qabf") && err.contains("MS_SSIM"), "{err}");
    assert!(!dir.path().join("m.csv").exists());
}

#[test]
fn ablate_over_fusion_rules_emits_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("ablate.csv");
    let mut args = vec!["ablate", "--synthetic", "5", "--holdout", "2", "--metrics", "EN,SD", "--out", s(&csv_path)];
    args.extend(TINY);
    let out = mapfuse(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let header = reader.headers().unwrap().clone();
    assert_eq!(&header[0], "fusion_rule");
    assert_eq!(header.iter().next_back(), Some("SD"));
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    let rules: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(rules, ["add", "concat", "mapping"]);
    assert!(rows.iter().all(|r| &r[7] == "ok"));
}

#[test]
fn gradcheck_passes_on_the_default_network() {
    let out = mapfuse(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("9 of 9 checks passed"));
}

#[test]
fn selftest_is_green() {
    let out = mapfuse(&["selftest", "--triples", "10"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(!stdout(&out).contains("FAIL"));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_mapfuse"))
        .args(["selftest", "--triples", "1"])
        .env("MAPFUSE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}
