//! End-to-end tests spawning the real binary: exit codes, output artifacts,
//! and idempotence of the full gen-data → train → protect → evaluate chain.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_waveguard"));
    // keep the environment from injecting a default data dir
    c.env_remove("WAVEGUARD_DATA_DIR");
    c
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn waveguard");
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Every file under `dir`, relative path -> content bytes, sorted.
fn dir_contents(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

#[test]
fn gen_data_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        run_ok(&[
            "gen-data",
            "--n",
            "12",
            "--resolution",
            "32",
            "--seed",
            "7",
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
    }
    assert_eq!(dir_contents(&a), dir_contents(&b));
    // regenerating over an existing dataset directory also succeeds
    run_ok(&[
        "gen-data",
        "--n",
        "12",
        "--resolution",
        "32",
        "--seed",
        "7",
        "--out-dir",
        a.to_str().unwrap(),
    ]);
    assert_eq!(dir_contents(&a), dir_contents(&b));
}

#[test]
fn full_pipeline_protect_evaluate_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let surrogate = tmp.path().join("surrogate.ckpt");
    let model = tmp.path().join("protector.ckpt");
    let log = tmp.path().join("train.csv");
    let eval = tmp.path().join("eval.csv");

    run_ok(&[
        "gen-data",
        "--n",
        "20",
        "--resolution",
        "32",
        "--seed",
        "3",
        "--out-dir",
        data.to_str().unwrap(),
    ]);
    run_ok(&[
        "train-surrogate",
        "--data-dir",
        data.to_str().unwrap(),
        "--epochs",
        "2",
        "--seed",
        "5",
        "--out",
        surrogate.to_str().unwrap(),
    ]);
    run_ok(&[
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--surrogate",
        surrogate.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch",
        "4",
        "--seed",
        "9",
        "--out",
        model.to_str().unwrap(),
        "--log",
        log.to_str().unwrap(),
    ]);
    assert!(fs::read_to_string(&log)
        .unwrap()
        .starts_with("epoch,l_rec,l_adv,l_swap,l_total"));

    // protect one dataset image; quantized deviation bounded by the budget
    let input = data.join("test").join("00000.png");
    let protected = tmp.path().join("protected.png");
    run_ok(&[
        "protect",
        "--model",
        model.to_str().unwrap(),
        "--input",
        input.to_str().unwrap(),
        "--out",
        protected.to_str().unwrap(),
    ]);
    let before = image::open(&input).unwrap().into_rgb8();
    let after = image::open(&protected).unwrap().into_rgb8();
    assert_eq!(before.dimensions(), after.dimensions());
    let bound = (0.05f64 * 255.0).round() as i32 + 1;
    let max_dev = before
        .pixels()
        .zip(after.pixels())
        .flat_map(|(p, q)| p.0.iter().zip(q.0.iter()))
        .map(|(&a, &b)| (a as i32 - b as i32).abs())
        .max()
        .unwrap();
    assert!(max_dev <= bound, "pixel deviation {max_dev} exceeds {bound} levels");

    // protecting a directory mirrors the file names
    let out_dir = tmp.path().join("protected");
    run_ok(&[
        "protect",
        "--model",
        model.to_str().unwrap(),
        "--input",
        data.join("test").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out_dir.join("00000.png").exists());
    assert!(out_dir.join("00001.png").exists());

    run_ok(&[
        "evaluate",
        "--model",
        model.to_str().unwrap(),
        "--surrogate",
        surrogate.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);
    let csv = fs::read_to_string(&eval).unwrap();
    assert!(csv.starts_with("index,psnr,ssim,l1_dist,success"));
    assert_eq!(csv.lines().count(), 3); // header + 2 test images

    let out = run_ok(&["report", eval.to_str().unwrap()]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("PSNR") && text.contains("SSIM") && text.contains("ASR"));
}

#[test]
fn exit_codes_follow_the_contract() {
    // success: help screens exit 0
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in [
        "gen-data",
        "train-surrogate",
        "train",
        "protect",
        "evaluate",
        "sweep-epsilon",
        "ablate-disc",
        "report",
    ] {
        assert!(text.contains(sub), "--help does not list {sub}");
    }
    let out = bin().args(["train", "--help"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in ["--lr", "--epsilon", "--epochs", "--batch", "--seed", "--no-discriminator"] {
        assert!(text.contains(flag), "train --help does not document {flag}");
    }
    assert!(text.contains("0.0001"), "train --help does not state the lr default");

    // usage errors exit 1
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["gen-data", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    // missing required flag (no env fallback) is a usage error
    let out = bin().args(["gen-data"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // runtime errors exit 2 and leave no partial output
    let tmp = tempfile::tempdir().unwrap();
    let eval = tmp.path().join("eval.csv");
    let out = bin()
        .args([
            "evaluate",
            "--model",
            "/nonexistent.ckpt",
            "--surrogate",
            "/nonexistent.ckpt",
            "--data-dir",
            "/nonexistent",
            "--out",
            eval.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(!eval.exists());
    let out = bin().args(["report", "/nonexistent.csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_dir_env_var_supplies_the_default() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = Command::new(env!("CARGO_BIN_EXE_waveguard"))
        .env("WAVEGUARD_DATA_DIR", data.to_str().unwrap())
        .args(["gen-data", "--n", "10", "--resolution", "32", "--seed", "1"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(data.join("manifest.json").exists());
}
