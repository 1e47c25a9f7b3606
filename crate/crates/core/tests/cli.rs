use std::path::Path;
use std::process::{Command, Output};

use maskquant::pipeline::RunReport;
use maskquant::qformat::QpkFile;

fn maskquant(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskquant"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn calib_quantize_eval_estimate() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--out", "run", "--group-width", "16", "--set", "calib_sequences=16"];
    let with = |cmd: &[&'static str]| [cmd, &common[..]].concat();

    ok(&maskquant(dir.path(), &with(&["calib"])));
    for layer in ["block0.up", "block0.down", "block1.up", "block1.down"] {
        assert!(dir.path().join(format!("run/stats/{layer}.qdt")).exists());
        assert!(dir.path().join(format!("run/stats/{layer}.count")).exists());
    }
    let stdout = ok(&maskquant(dir.path(), &with(&["quantize"])));
    assert!(stdout.contains("block1.down"));
    let eval = ok(&maskquant(dir.path(), &with(&["eval"])));
    assert!(eval.contains("mean_kl="));

    let report = RunReport::read(dir.path().join("run/report.json")).unwrap();
    assert_eq!(report.layers.len(), 4);
    assert!(report.layers.iter().all(|l| l.proxy_nonincreasing && l.budget_ok));
    assert!(report.layers.iter().all(|l| l.samples == Some(16 * 8 * 64)));
    assert!(report.eval.is_some());
    assert_eq!(report.config["group_width"], "16");
    let memory = report.memory.unwrap();
    assert!(memory.estimate_matches_file);

    let file = QpkFile::read(dir.path().join("run/model.qpk")).unwrap();
    assert_eq!(file.layers.len(), 4);
    let est = ok(&maskquant(dir.path(), &["estimate-mem", "--qpk", "run/model.qpk"]));
    assert!(est.contains(&format!("qpk file bytes: {} (match)", memory.qpk_bytes)), "{est}");
}

#[test]
fn config_file_and_flags_combine() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("toy.cfg"),
        "# small run\nseed = 3\ncalib_sequences = 8\ngroup_width = 8\ninclude = block0.up\n",
    )
    .unwrap();
    ok(&maskquant(dir.path(), &["--config", "toy.cfg", "--no-mcs", "--out", "o", "calib"]));
    ok(&maskquant(dir.path(), &["--config", "toy.cfg", "--no-mcs", "--no-abmp", "--order", "3", "--out", "o", "quantize"]));
    let report = RunReport::read(dir.path().join("o/report.json")).unwrap();
    assert_eq!(report.seed, 3);
    assert_eq!(report.layers.len(), 1);
    assert_eq!(report.layers[0].histogram, [0, 0, 4]);
    assert_eq!(report.layers[0].samples, Some(8 * 64));
    assert_eq!(report.config["use_mcs"], "false");
}

#[test]
fn presets_print_anchors() {
    let dir = tempfile::tempdir().unwrap();
    let fp16 = ok(&maskquant(dir.path(), &["estimate-mem", "--preset", "fp16-8b"]));
    assert!(fp16.contains("total GB: 16.090"), "{fp16}");
    let two = ok(&maskquant(dir.path(), &["estimate-mem", "--preset", "llada8b-2bit"]));
    assert!(two.contains("assumption:"));
    let gb: f64 = two
        .lines()
        .find_map(|l| l.strip_prefix("total GB: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((3.1..=4.3).contains(&gb));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| maskquant(dir.path(), args).status.code();

    assert_eq!(code(&["--set", "bogus=1", "calib"]), Some(2));
    assert_eq!(code(&["--order", "3", "quantize"]), Some(2));
    assert_eq!(code(&["--ratio", "0.7", "calib"]), Some(2));
    assert_eq!(code(&["--out", "missing", "quantize"]), Some(3));
    std::fs::write(dir.path().join("junk.qpk"), b"QPK1\x01\x00\x00\x00").unwrap();
    assert_eq!(code(&["estimate-mem", "--qpk", "junk.qpk"]), Some(5));
    std::fs::write(dir.path().join("bad.qpk"), b"NOPE").unwrap();
    assert_eq!(code(&["eval", "--qpk", "bad.qpk"]), Some(5));
    // clap usage errors
    assert_eq!(code(&["frobnicate"]), Some(2));
}

#[test]
fn stats_of_the_wrong_width_name_the_layer() {
    let dir = tempfile::tempdir().unwrap();
    ok(&maskquant(dir.path(), &["--out", "a", "--set", "calib_sequences=4", "calib"]));
    // swap in statistics of a different width
    let stats = dir.path().join("a/stats");
    for ext in ["qdt", "count"] {
        std::fs::copy(stats.join(format!("block0.down.{ext}")), stats.join(format!("block0.up.{ext}"))).unwrap();
    }
    let out = maskquant(dir.path(), &["--out", "a", "quantize"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("block0.up"));
}
