//! End-to-end runs of the `stsn` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stsn_cli::Checkpoint;
use stsn_core::synthvid::{generate_dataset, write_dataset, ClipConfig};
use stsn_core::{ModelConfig, StsnParams};
use tempfile::TempDir;

fn stsn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stsn")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_model() -> ModelConfig {
    ModelConfig {
        feature_channels: 4,
        embed_channels: [2, 2, 4],
        ..Default::default()
    }
}

const SMALL_CONFIG: &str = "[model]\nfeature_channels = 4\nembed_channels = [2, 2, 4]\n\
[train]\niterations = 4\nlog_every = 2\nseed = 3\n";

fn gen_data(dir: &Path, clips: usize, seed: u64) {
    let out = stsn(&["gen-data", "--out", s(dir), "--clips", &clips.to_string(), "--seed", &seed.to_string()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &TempDir, text: &str) -> PathBuf {
    let p = dir.path().join("run.toml");
    fs::write(&p, text).unwrap();
    p
}

fn untrained_checkpoint(dir: &TempDir) -> PathBuf {
    let cfg = small_model();
    let p = dir.path().join("init.ckpt");
    Checkpoint::from_params(&cfg, &StsnParams::<f64>::init(&cfg, 0).unwrap()).save(&p).unwrap();
    p
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn gen_data_writes_requested_clips_deterministically() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = stsn(&["gen-data", "--out", s(&a), "--clips", "4", "--frames", "9", "--seed", "7"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("clips=4 frames=9 degraded="));
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["clip_count"], 4);
    let clips = manifest["clips"].as_array().unwrap();
    assert_eq!(clips.len(), 4);
    assert!(clips.iter().all(|c| c["frames"] == 9));

    assert_eq!(code(&stsn(&["gen-data", "--out", s(&b), "--clips", "4", "--frames", "9", "--seed", "7"])), 0);
    assert_eq!(snapshot(&a), snapshot(&b));
}

#[test]
fn gen_data_flag_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = s(dir.path());
    assert_eq!(code(&stsn(&["gen-data", "--out", out, "--frames", "0"])), 2);
    assert_eq!(code(&stsn(&["gen-data", "--out", out, "--size", "64by64"])), 2);
    assert_eq!(code(&stsn(&["gen-data", "--out", out, "--blur-prob", "1.5"])), 2);
    assert_eq!(code(&stsn(&["gen-data"])), 2);
}

#[test]
fn gen_data_io_error_exits_3() {
    let dir = TempDir::new().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, b"x").unwrap();
    assert_eq!(code(&stsn(&["gen-data", "--out", s(&file.join("sub")), "--clips", "1"])), 3);
}

#[test]
fn train_static_baseline_and_round_trip() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 3, 1);
    let before = snapshot(&data);
    let cfg = write_config(&dir, SMALL_CONFIG);
    let ckpt = dir.path().join("ssn.ckpt");
    let out = stsn(&["train", "--data", s(&data), "--config", s(&cfg), "--out", s(&ckpt), "--static-baseline", "--quiet"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let loaded = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(loaded.config.support_frames, 0);
    assert_eq!(loaded.to_bytes(), fs::read(&ckpt).unwrap());

    let (header, rows) = read_csv(&ckpt.with_extension("loss.csv"));
    assert_eq!(header, ["iteration", "loss"]);
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[1].parse::<f64>().unwrap().is_finite()));
    assert_eq!(snapshot(&data), before, "dataset directory was modified");
}

#[test]
fn train_errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 2, 2);
    let ckpt = dir.path().join("x.ckpt");
    assert_eq!(code(&stsn(&["train", "--out", s(&ckpt)])), 2);

    let bad = write_config(&dir, "[train]\nwarmup = 3\n");
    assert_eq!(code(&stsn(&["train", "--data", s(&data), "--config", s(&bad), "--out", s(&ckpt)])), 2);

    let poisoned = dir.path().join("nan");
    let mut clips = generate_dataset(&ClipConfig { seed: 8, ..Default::default() }, 1).unwrap();
    clips[0].frames = clips[0].frames.map(|_| f32::NAN);
    fs::create_dir_all(&poisoned).unwrap();
    write_dataset(&clips, &poisoned).unwrap();
    let small = write_config(&dir, SMALL_CONFIG);
    let out = stsn(&["train", "--data", s(&poisoned), "--config", s(&small), "--out", s(&ckpt), "--quiet"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));

    let narrow = write_config(&dir, &format!("{SMALL_CONFIG}[data]\nprecision = \"f32\"\n[model.x]\n"));
    assert_eq!(code(&stsn(&["train", "--data", s(&data), "--config", s(&narrow), "--out", s(&ckpt)])), 2);

    let missing = dir.path().join("nowhere");
    assert_eq!(code(&stsn(&["train", "--data", s(&missing), "--out", s(&ckpt)])), 3);
}

#[test]
fn eval_report_rows_and_weight_profile() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("frozen");
    let clips: Vec<_> = generate_dataset(&ClipConfig { seed: 40, ..Default::default() }, 3)
        .unwrap()
        .iter()
        .map(|c| c.frozen_at(c.reference))
        .collect();
    fs::create_dir_all(&data).unwrap();
    write_dataset(&clips, &data).unwrap();
    let ckpt = untrained_checkpoint(&dir);
    let report = dir.path().join("report.csv");
    let out = stsn(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--K", "0,2", "--stride", "1,2", "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let (header, rows) = read_csv(&report);
    assert_eq!(header, ["K", "stride", "mAP"]);
    let pairs: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(pairs, [("0", "1"), ("0", "2"), ("2", "1"), ("2", "2")]);
    let maps: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(maps.iter().all(|m| (m - maps[0]).abs() <= 1e-9), "{maps:?}");

    let (header, rows) = read_csv(&report.with_extension("weights.csv"));
    assert_eq!(header, ["K", "stride", "k", "mean_weight"]);
    assert_eq!(rows.len(), 1 + 1 + 5 + 5);
    for (k, stride) in pairs {
        let sum: f64 = rows
            .iter()
            .filter(|r| r[0] == k && r[1] == stride)
            .map(|r| r[3].parse::<f64>().unwrap())
            .sum();
        assert!((sum - 1.0).abs() < 1e-6, "K={k} stride={stride}: {sum}");
    }
}

#[test]
fn eval_rejects_incompatible_checkpoints() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 1, 3);
    let cfg = ModelConfig {
        image_h: 32,
        image_w: 32,
        ..small_model()
    };
    let ckpt = dir.path().join("small.ckpt");
    Checkpoint::from_params(&cfg, &StsnParams::<f64>::init(&cfg, 0).unwrap()).save(&ckpt).unwrap();
    let report = dir.path().join("r.csv");
    let args = ["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--report", s(&report)];
    assert_eq!(code(&stsn(&args)), 5);

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[8] = 9;
    fs::write(&ckpt, &bytes).unwrap();
    assert_eq!(code(&stsn(&args)), 5);
}

#[test]
fn viz_offsets_with_zero_init_offsets() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 2, 4);
    let ckpt = untrained_checkpoint(&dir);
    let out_dir = dir.path().join("viz");
    let out = stsn(&["viz-offsets", "--ckpt", s(&ckpt), "--data", s(&data), "--clip", "1", "--frame", "4", "--out", s(&out_dir), "--K", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let (header, rows) = read_csv(&out_dir.join("offsets.csv"));
    assert_eq!(header, ["k", "ref_y", "ref_x", "mean_dy", "mean_dx"]);
    assert_eq!(rows.len(), 5);
    for r in &rows {
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
        assert_eq!(r[4].parse::<f64>().unwrap(), 0.0);
    }
    for k in ["-2", "-1", "+0", "+1", "+2"] {
        let bytes = fs::read(out_dir.join(format!("offsets_k{k}.ppm"))).unwrap();
        let header = b"P6\n64 64 255\n";
        assert!(bytes.starts_with(header), "{:?}", &bytes[..16]);
        assert_eq!(bytes.len(), header.len() + 64 * 64 * 3);
    }
}

#[test]
fn viz_offsets_range_errors_exit_6() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data");
    gen_data(&data, 2, 5);
    let ckpt = untrained_checkpoint(&dir);
    let out = dir.path().join("viz");
    let run = |clip: &str, frame: &str, object: &str| {
        code(&stsn(&["viz-offsets", "--ckpt", s(&ckpt), "--data", s(&data), "--clip", clip, "--frame", frame, "--out", s(&out), "--object", object]))
    };
    assert_eq!(run("2", "0", "0"), 6);
    assert_eq!(run("0", "9", "0"), 6);
    assert_eq!(run("0", "0", "7"), 6);
    assert_eq!(run("0", "0", "0"), 0);
}
