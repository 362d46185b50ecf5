use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sdace::checkpoint::save_checkpoint;
use sdace::imaging::{load_image, save_image};
use sdace::nets::{DenoisingNet, LuminanceNet, Network};
use sdace::ImageTensor;
use tempfile::TempDir;

fn sdace(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdace"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn dark_image(seed: usize, size: usize) -> ImageTensor {
    let data = (0..size * size * 3)
        .map(|i| 0.05 + 0.1 * (((i * 7 + seed * 13) % 17) as f32 / 17.0))
        .collect();
    ImageTensor::new(size, size, data).unwrap()
}

fn image_dir(root: &Path, n: usize, size: usize) -> PathBuf {
    let dir = root.join("data");
    fs::create_dir_all(&dir).unwrap();
    for i in 0..n {
        save_image(&dark_image(i, size), dir.join(format!("img{i}.png"))).unwrap();
    }
    dir
}

fn wiggle(weights: &[f32], scale: f32) -> Vec<f32> {
    weights
        .iter()
        .enumerate()
        .map(|(i, w)| w + scale * ((i as f32 * 0.7).sin()))
        .collect()
}

fn luminance_ckpt(root: &Path) -> PathBuf {
    let base = LuminanceNet::new(2, 4, 3).unwrap();
    let net = LuminanceNet::from_weights(&base.descriptor(), &wiggle(&base.flat_weights(), 0.2)).unwrap();
    let path = root.join("lum.sdace");
    save_checkpoint(&net, None, &path).unwrap();
    path
}

fn denoising_ckpt(root: &Path) -> PathBuf {
    let base = DenoisingNet::new(3, 4, 5).unwrap();
    let net = DenoisingNet::from_weights(&base.descriptor(), &wiggle(&base.flat_weights(), 0.3)).unwrap();
    let path = root.join("den.sdace");
    save_checkpoint(&net, None, &path).unwrap();
    path
}

fn log_rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count() - 1
}

#[test]
fn inspect_prints_complexity() {
    let out = sdace(&["inspect", "--net", "luminance", "--hw", "900x1200"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).trim(), "params=0.068M macs=73.716G");
}

#[test]
fn inspect_rejects_bad_size() {
    assert_eq!(code(&sdace(&["inspect", "--hw", "900"])), 1);
}

#[test]
fn curve_csv_row() {
    let out = sdace(&["curve", "--alpha", "1", "--beta", "1", "--iters", "1", "--samples", "11"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert_eq!(text.lines().next(), Some("input,output"));
    assert_eq!(text.lines().count(), 12);
    assert!(text.lines().any(|l| l == "0.500000,0.649672"), "{text}");
}

#[test]
fn curve_rejects_out_of_range_parameters() {
    assert_eq!(code(&sdace(&["curve", "--alpha", "1.5", "--beta", "1"])), 1);
    assert_eq!(code(&sdace(&["curve", "--alpha", "0", "--beta", "0.2"])), 1);
    assert_eq!(code(&sdace(&["curve", "--alpha", "0", "--beta", "1", "--samples", "1"])), 1);
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&sdace(&["--help"])), 0);
    assert_eq!(code(&sdace(&["--version"])), 0);
    assert_eq!(code(&sdace(&[])), 1);
    assert_eq!(code(&sdace(&["bogus"])), 1);
}

#[test]
fn train_missing_data_is_usage_error() {
    let out = sdace(&["train", "--stage", "1", "--out", "c.sdace"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn train_stage2_requires_stage1_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 1, 8);
    let out = tmp.path().join("d.sdace");
    assert_eq!(code(&sdace(&["train", "--stage", "2", "--data", s(&data), "--out", s(&out)])), 1);
    assert!(!out.exists());
}

#[test]
fn train_invalid_numbers_are_usage_errors() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 1, 8);
    let out = tmp.path().join("c.sdace");
    for bad in [["--lr", "0"], ["--size", "2"], ["--batch-size", "0"], ["--epochs", "-1"]] {
        let mut args = vec!["train", "--stage", "1", "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(&bad);
        assert_eq!(code(&sdace(&args)), 1, "{bad:?}");
    }
    assert!(!out.exists());
}

#[test]
fn train_empty_directory_is_data_error() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("c.sdace");
    assert_eq!(code(&sdace(&["train", "--stage", "1", "--data", s(tmp.path()), "--out", s(&out)])), 2);
}

#[test]
fn train_stage1_writes_checkpoint_and_log() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 4, 16);
    let out = tmp.path().join("c.sdace");
    let res = sdace(&[
        "train", "--stage", "1", "--data", s(&data), "--out", s(&out), "--epochs", "2", "--size", "16", "--seed", "7",
        "--threads", "2",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.exists());
    assert_eq!(log_rows(&tmp.path().join("c.sdace.csv")), 2);
    assert!(tmp.path().join("c.sdace.adam").exists());

    // Resuming to four epochs appends two more rows.
    let res = sdace(&[
        "train", "--stage", "1", "--data", s(&data), "--out", s(&out), "--epochs", "4", "--size", "16", "--seed", "7",
        "--resume",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(log_rows(&tmp.path().join("c.sdace.csv")), 4);
}

#[test]
fn train_reads_config_file() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 2, 8);
    let cfg = tmp.path().join("train.toml");
    fs::write(&cfg, "epochs = 3\nsize = 8\nbatch_size = 2\n").unwrap();
    let out = tmp.path().join("c.sdace");
    let res = sdace(&["train", "--stage", "1", "--data", s(&data), "--out", s(&out), "--config", s(&cfg)]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(log_rows(&tmp.path().join("c.sdace.csv")), 3);

    // A flag beats the file.
    let out2 = tmp.path().join("e.sdace");
    let res = sdace(&[
        "train", "--stage", "1", "--data", s(&data), "--out", s(&out2), "--config", s(&cfg), "--epochs", "1",
    ]);
    assert_eq!(code(&res), 0);
    assert_eq!(log_rows(&tmp.path().join("e.sdace.csv")), 1);

    fs::write(&cfg, "epochz = 3\n").unwrap();
    let res = sdace(&["train", "--stage", "1", "--data", s(&data), "--out", s(&out2), "--config", s(&cfg)]);
    assert_eq!(code(&res), 1);
}

#[test]
fn train_stage2_runs_from_stage1_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 2, 8);
    let lum = tmp.path().join("c.sdace");
    let res = sdace(&["train", "--stage", "1", "--data", s(&data), "--out", s(&lum), "--epochs", "1", "--size", "8"]);
    assert_eq!(code(&res), 0);
    let before = fs::read(&lum).unwrap();
    let den = tmp.path().join("d.sdace");
    let res = sdace(&[
        "train", "--stage", "2", "--data", s(&data), "--out", s(&den), "--stage1-ckpt", s(&lum), "--epochs", "1",
        "--size", "8", "--denoise-depth", "3", "--denoise-width", "4",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(log_rows(&tmp.path().join("d.sdace.csv")), 1);
    assert_eq!(fs::read(&lum).unwrap(), before);
}

#[test]
fn enhance_directory() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 3, 12);
    let lum = luminance_ckpt(tmp.path());
    let den = denoising_ckpt(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["enhance", "--stage1", s(&lum), "--input", s(&data), "--out-dir", s(out)];
        args.extend_from_slice(extra);
        let res = sdace(&args);
        assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    };
    run(&a, &[]);
    run(&b, &[]);
    run(&c, &["--stage2", s(&den)]);
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names, ["img0_enh.png", "img1_enh.png", "img2_enh.png"]);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap());
    }
    assert!(names.iter().any(|n| fs::read(a.join(n)).unwrap() != fs::read(c.join(n)).unwrap()));
    // The enhancement actually changed something.
    let src = load_image(data.join("img0.png")).unwrap();
    let out = load_image(a.join("img0_enh.png")).unwrap();
    assert_ne!(src.data(), out.data());
}

#[test]
fn enhance_single_file() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 1, 10);
    let lum = luminance_ckpt(tmp.path());
    let out = tmp.path().join("out");
    let res = sdace(&["enhance", "--stage1", s(&lum), "--input", s(&data.join("img0.png")), "--out-dir", s(&out)]);
    assert_eq!(code(&res), 0);
    assert!(out.join("img0_enh.png").exists());
}

#[test]
fn enhance_unreadable_checkpoint_is_data_error() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 1, 8);
    let bad = tmp.path().join("bad.sdace");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = tmp.path().join("out");
    assert_eq!(code(&sdace(&["enhance", "--stage1", s(&bad), "--input", s(&data), "--out-dir", s(&out)])), 2);
    let lum = luminance_ckpt(tmp.path());
    let res = sdace(&["enhance", "--stage1", s(&lum), "--stage2", s(&lum), "--input", s(&data), "--out-dir", s(&out)]);
    assert_eq!(code(&res), 2);
}

#[test]
fn decompose_writes_both_maps() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 2, 8);
    let out = tmp.path().join("dec");
    assert_eq!(code(&sdace(&["decompose", "--input", s(&data), "--out-dir", s(&out)])), 0);
    for i in 0..2 {
        let illum = image::open(out.join(format!("img{i}_illum.png"))).unwrap();
        assert_eq!(illum.color(), image::ColorType::L8);
        let refl = load_image(out.join(format!("img{i}_refl.png"))).unwrap();
        assert_eq!((refl.height(), refl.width()), (8, 8));
    }
}

#[test]
fn add_noise_writes_beside_input() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 2, 8);
    let res = sdace(&["add-noise", "--input", s(&data), "--seed", "3", "--sigma-min", "0.05", "--sigma-max", "0.05"]);
    assert_eq!(code(&res), 0);
    let first = fs::read(data.join("img0_noisy.png")).unwrap();
    assert!(data.join("img1_noisy.png").exists());
    let clean = load_image(data.join("img0.png")).unwrap();
    assert_ne!(load_image(data.join("img0_noisy.png")).unwrap().data(), clean.data());

    // Same seed, same bytes.
    let res = sdace(&["add-noise", "--input", s(&data.join("img0.png")), "--seed", "3", "--sigma-min", "0.05", "--sigma-max", "0.05"]);
    assert_eq!(code(&res), 0);
    assert_eq!(fs::read(data.join("img0_noisy.png")).unwrap(), first);

    assert_eq!(code(&sdace(&["add-noise", "--input", s(&data), "--sigma-min", "0.2", "--sigma-max", "0.1"])), 1);
}

#[test]
fn eval_identical_directories() {
    let tmp = TempDir::new().unwrap();
    let data = image_dir(tmp.path(), 2, 16);
    let report = tmp.path().join("r.csv");
    let res = sdace(&["eval", "--pred", s(&data), "--gt", s(&data), "--out", s(&report)]);
    assert_eq!(code(&res), 0);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<_> = text.lines().collect();
    assert_eq!(lines[0], "filename,psnr,ssim,ciede2000");
    assert_eq!(lines.len(), 4);
    assert_eq!(*lines.last().unwrap(), "MEAN,100.000000,1.000000,0.000000");

    let again = sdace(&["eval", "--pred", s(&data), "--gt", s(&data)]);
    assert_eq!(stdout(&again), text);
}

#[test]
fn eval_without_pairs_is_data_error() {
    let tmp = TempDir::new().unwrap();
    let a = image_dir(tmp.path(), 1, 8);
    let b = tmp.path().join("empty");
    fs::create_dir_all(&b).unwrap();
    assert_eq!(code(&sdace(&["eval", "--pred", s(&a), "--gt", s(&b)])), 2);
    assert_eq!(code(&sdace(&["eval", "--pred", s(&a), "--gt", s(&a), "--metrics", "lpips"])), 1);
}

#[test]
fn gradcheck_passes() {
    let out = sdace(&["gradcheck", "--seed", "0"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    assert!(stdout(&out).contains("gradient checks passed"));
}
