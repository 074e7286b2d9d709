use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

fn slrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slrf")).args(args).env_remove("SLRF_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = slrf(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset plus a two-iteration checkpoint shared by the tests.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    config: PathBuf,
    ckpt: PathBuf,
}

const SMALL_CONFIG: &str = r#"{
  "number_of_nodes": 16,
  "number_of_ray_samples_per_batch": 64,
  "number_of_point_samples_per_ray": 8,
  "batch_size": 2,
  "checkpoint_every": 2,
  "eval_views": 1
}"#;

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&["gen-data", "--frames", "3", "--cameras", "2", "--res", "24", "--seed", "5", "--out", s(&data)]);
        let config = dir.path().join("small.json");
        fs::write(&config, SMALL_CONFIG).unwrap();
        let run = dir.path().join("run");
        ok(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&run), "--iters", "2"]);
        let ckpt = run.join("checkpoints/iter_0000002.slrf");
        assert!(ckpt.is_file());
        Fixture { _dir: dir, data, config, ckpt }
    })
}

fn tree_digest(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let h = Sha256::digest(fs::read(&p).unwrap()).to_vec();
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), h));
            }
        }
    }
    files.sort();
    files
}

fn read_log(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

#[test]
fn gen_data_defaults_and_single_frame() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = ok(&["gen-data", "--res", "8", "--out", s(&out)]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("resolved config:"));
    let meta: Value = serde_json::from_str(&fs::read_to_string(out.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["cameras"], 4);
    assert_eq!(meta["frames"], 16);

    let one = dir.path().join("one");
    ok(&["gen-data", "--res", "8", "--frames", "1", "--out", s(&one)]);
    let meta: Value = serde_json::from_str(&fs::read_to_string(one.join("meta.json")).unwrap()).unwrap();
    assert_eq!(meta["frames"], 1);
    assert_eq!(meta["difficulty"], "static");
}

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for p in [&a, &b] {
        ok(&["gen-data", "--frames", "2", "--cameras", "2", "--res", "16", "--seed", "9", "--out", s(p)]);
    }
    assert_eq!(tree_digest(&a), tree_digest(&b));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("plain");
    fs::write(&file, "x").unwrap();
    assert_eq!(code(&slrf(&["gen-data", "--res", "8", "--out", s(&file.join("sub"))])), 2);
    assert_eq!(code(&slrf(&["gen-data", "--bogus", "--out", "x"])), 2);
    assert_eq!(code(&slrf(&["frobnicate"])), 2);

    let f = fixture();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{ "number_of_nodez": 16 }"#).unwrap();
    let o = slrf(&["train", "--data", s(&f.data), "--config", s(&bad), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("number_of_nodez"));

    let o = slrf(&["train", "--data", s(&dir.path().join("nope")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn zero_iterations_writes_initial_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(dir.path()), "--iters", "0"]);
    assert!(dir.path().join("checkpoints/iter_0000000.slrf").is_file());
    assert!(dir.path().join("checkpoints/iter_0000000.json").is_file());
    assert!(dir.path().join("best.slrf").is_file());
}

#[test]
fn flags_override_config_and_threads_come_from_env() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_slrf"))
        .args(["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(dir.path()), "--iters", "0"])
        .args(["--seed", "41"])
        .env("SLRF_THREADS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    let line = err.lines().find_map(|l| l.strip_prefix("resolved config: ")).unwrap();
    let v: Value = serde_json::from_str(line).unwrap();
    assert_eq!(v["threads"], 1);
    assert_eq!(v["config"]["train"]["seed"], 41);
    assert_eq!(v["config"]["train"]["number_of_nodes"], 16);
    assert_eq!(v["config"]["train"]["iterations"], 0);
}

#[test]
fn no_embeddings_ablation_keeps_embeddings_zero() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(dir.path()), "--iters", "3", "--ablate",
        "no-embeddings",
    ]);
    let log = read_log(&dir.path().join("train_log.jsonl"));
    assert_eq!(log.len(), 3);
    for l in &log {
        assert_eq!(l["e_rms"], 0.0);
        assert_eq!(l["loss"]["ebd"], 0.0);
        assert!(l["dn_rms"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let train = |out: &Path, iters: &str, resume: bool| {
        let mut args = vec!["train", "--data", s(&f.data), "--config", s(&f.config), "--out", s(out), "--iters", iters];
        if resume {
            args.push("--resume");
        }
        ok(&args);
    };
    train(&a, "4", false);
    train(&b, "2", false);
    train(&b, "4", true);
    assert_eq!(read_log(&a.join("train_log.jsonl")), read_log(&b.join("train_log.jsonl")));
    let final_a = fs::read(a.join("checkpoints/iter_0000004.slrf")).unwrap();
    let final_b = fs::read(b.join("checkpoints/iter_0000004.slrf")).unwrap();
    assert_eq!(final_a, final_b);
}

#[test]
fn render_modes() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let base = ["render", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--camera", "1"];
    let (r1, r2) = (dir.path().join("r1"), dir.path().join("r2"));
    for out in [&r1, &r2] {
        let mut args = base.to_vec();
        args.extend(["--frame", "2", "--out", s(out)]);
        ok(&args);
    }
    let name = "replay_cam1_frame0002.png";
    assert_eq!(fs::read(r1.join(name)).unwrap(), fs::read(r2.join(name)).unwrap());

    let mut args = base.to_vec();
    args.extend(["--mode", "novel", "--frame", "0", "--out", s(dir.path())]);
    assert_eq!(code(&slrf(&args)), 2);

    let z = dir.path().join("z.json");
    fs::write(&z, "[1.5, -2.0, 0.7, 1.1, -0.4, 2.2, -1.3, 0.9]").unwrap();
    let (n0, n1) = (dir.path().join("n0"), dir.path().join("n1"));
    let mut args = base.to_vec();
    args.extend(["--mode", "novel", "--out", s(&n0)]);
    ok(&args);
    let mut args = base.to_vec();
    args.extend(["--mode", "novel", "--z", s(&z), "--out", s(&n1)]);
    ok(&args);
    assert_ne!(fs::read(n0.join("novel_cam1.png")).unwrap(), fs::read(n1.join("novel_cam1.png")).unwrap());

    let bad = dir.path().join("short.json");
    fs::write(&bad, "[1.0, 2.0]").unwrap();
    let mut args = base.to_vec();
    args.extend(["--mode", "novel", "--z", s(&bad), "--out", s(dir.path())]);
    assert_eq!(code(&slrf(&args)), 2);
}

#[test]
fn animate_writes_one_png_per_frame() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    ok(&["animate", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--samples", "4", "--out", s(dir.path())]);
    let mut names: Vec<String> =
        fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names, ["frame_0000.png", "frame_0001.png", "frame_0002.png"]);
}

#[test]
fn eval_reports_every_view() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["eval", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--out", s(dir.path())]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().next().unwrap().contains("psnr"));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("metrics.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows.iter().all(|r| r["psnr"].is_number() && r["ssim"].is_number()));

    let o = ok(&["eval", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--split", "frames:1-2", "--metrics", "psnr"]);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1 + 2 * 2 + 1);
    assert_eq!(code(&slrf(&["eval", "--ckpt", s(&f.ckpt), "--data", s(&f.data), "--split", "frames:7"])), 2);
}

#[test]
fn bench_reports_both_paths() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["bench", "--res", "16", "--samples", "8", "--out", s(dir.path())]);
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(r["timings"].as_array().unwrap().len(), 2);
    assert!(r["max_abs_diff"].as_f64().unwrap() < 1e-5);
    assert!(r["speedup"].as_f64().unwrap() > 0.0);
    let ratio = r["timings"][1]["memory_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio <= 1.0);
}

#[test]
fn gradcheck_passes_and_names_corrupted_group() {
    let o = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(!text.contains("FAIL"));
    assert!(text.contains("cvae.enc"));

    let o = slrf(&["gradcheck", "--corrupt", "density"]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("failed for density"), "{err}");
}
