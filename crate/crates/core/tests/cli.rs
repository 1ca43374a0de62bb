use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use banet::volume::{read_image, read_labels};

fn banet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_banet"))
        .args(args)
        .output()
        .expect("spawn banet")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write(p: &Path, text: &str) {
    fs::write(p, text).unwrap();
}

#[test]
fn usage_errors_exit_1_and_help_exits_0() {
    assert_eq!(banet(&[]).status.code(), Some(1));
    assert_eq!(banet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(banet(&["infer", "--in", "x"]).status.code(), Some(1));
    assert_eq!(banet(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = banet(&["eval", "--pred", s(&dir.path().join("nope")), "--gt", s(dir.path()), "--report", s(&dir.path().join("r.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn gen_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(banet(&["gen", "--out", s(d), "--count", "2"]).status.code(), Some(0));
    }
    for name in ["phantom_000", "phantom_001", "phantom_000_seg", "phantom_001_seg"] {
        assert_eq!(fs::read(a.join(format!("{name}.raw"))).unwrap(), fs::read(b.join(format!("{name}.raw"))).unwrap());
    }
    let img = read_image(&a.join("phantom_001")).unwrap();
    let lab = read_labels(&a.join("phantom_001_seg")).unwrap();
    assert_eq!(img.dims(), [32, 32, 32]);
    assert_eq!(lab.num_classes(), 4);
    assert_ne!(fs::read(a.join("phantom_000.raw")).unwrap(), fs::read(a.join("phantom_001.raw")).unwrap());
}

#[test]
fn gen_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    write(
        &p("phantom.json"),
        r#"{"dims": [16, 16, 16], "num_organs": 2, "radius_ranges": [[4, 5], [2, 2.5]], "seed": 3}"#,
    );
    write(
        &p("net.json"),
        r#"{"levels": 2, "base_channels": 4, "channel_cap": 16, "num_classes": 3, "patch_dims": [16, 16, 16]}"#,
    );
    write(
        &p("train.json"),
        r#"{"max_epochs": 4, "steps_per_epoch": 2, "batch_size": 1, "patch_dims": [16, 16, 16], "seed": 9}"#,
    );
    let data = p("data");
    assert_eq!(banet(&["gen", "--config", s(&p("phantom.json")), "--out", s(&data), "--count", "3"]).status.code(), Some(0));

    let ckpt = p("runs/model");
    let out = banet(&["train", "--data", s(&data), "--net", s(&p("net.json")), "--train", s(&p("train.json")), "--out", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(p("runs/model.ckpt.json").exists() && p("runs/model.ckpt.raw").exists());
    let csv = fs::read_to_string(p("runs/model.loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(csv.lines().next(), Some("epoch,mean_loss,lr"));

    let input = data.join("phantom_002");
    let one = p("pred1/phantom_002");
    let two = p("pred2/phantom_002");
    let c = s(&p("runs/model.ckpt.json")).to_string();
    let pair = format!("{c},{c}");
    let r1 = banet(&["infer", "--ckpt", &c, "--in", s(&input), "--out", s(&one), "--dump-midslice", "--probs"]);
    assert_eq!(r1.status.code(), Some(0), "{}", String::from_utf8_lossy(&r1.stderr));
    let r2 = banet(&["infer", "--ckpt", &pair, "--in", s(&input), "--out", s(&two), "--overlap", "0.5"]);
    assert_eq!(r2.status.code(), Some(0));
    assert_eq!(fs::read(one.with_extension("raw")).unwrap(), fs::read(two.with_extension("raw")).unwrap());
    assert!(fs::read(p("pred1/phantom_002.pgm")).unwrap().starts_with(b"P5\n16 16\n255\n"));
    assert!(p("pred1/phantom_002_probs.json").exists());

    let report = p("report.csv");
    let e = banet(&["eval", "--pred", s(&p("pred1")), "--gt", s(&data), "--report", s(&report)]);
    assert_eq!(e.status.code(), Some(0), "{}", String::from_utf8_lossy(&e.stderr));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "case,class,dice");
    assert_eq!(lines.len(), 1 + 3 + 1);
    let last: Vec<&str> = lines[4].split(',').collect();
    assert_eq!(&last[..2], &["all", "mean"]);
    let mean: f64 = last[2].parse().unwrap();
    assert!((0.0..=1.0).contains(&mean));
    assert!(String::from_utf8_lossy(&e.stdout).contains("mean Dice"));
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    write(&cfg, r#"{"noise_sigma": -1}"#);
    let out = banet(&["gen", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}
