use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_mlomae");

fn mlomae(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("MLOMAE_SEED").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config for a few-second run on a 4×4 image with 2×2 patches.
fn write_config(dir: &Path, epochs: u64, extra: &str) -> String {
    let text = format!(
        "image_side = 4\npatch_size = 2\nemb_dim = 4\ndec_dim = 4\nenc_blocks = 1\n\
         dec_blocks = 1\nheads = 1\nnum_classes = 2\nmask_hidden = 8\n\
         synth_informative = 0, 3\nsynth_per_class = 10\nbatch_size = 4\ntotal_epochs = {epochs}\n\
         out_dir = {}\n{extra}",
        dir.join("run").display()
    );
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn gradcheck_passes_and_reports_the_toy() {
    let o = mlomae(&["gradcheck"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("bilevel_toy t=0.3 hypergradient 0.300000000"), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn gradcheck_catches_a_flipped_c_path() {
    let o = mlomae(&["gradcheck", "--flip-c-path-sign"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("pipeline oracle"), "{}", stderr(&o));
}

#[test]
fn zero_epochs_write_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0, "");
    let o = mlomae(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let metrics = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(dir.path().join("run/final.mlom").exists());
}

#[test]
fn strict_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2, "");
    let run = || {
        let o = mlomae(&["train", "--config", &cfg, "--strict"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read(dir.path().join("run/metrics.csv")).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 1 + 4);
}

#[test]
fn resume_continues_the_metrics_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2, "");
    let full = {
        let o = mlomae(&["train", "--config", &cfg, "--strict"]);
        assert_eq!(code(&o), 0);
        std::fs::read(dir.path().join("run/metrics.csv")).unwrap()
    };
    let o = mlomae(&["train", "--config", &cfg, "--strict", "--stop-after", "1"]);
    assert_eq!(code(&o), 0);
    let ckpt = dir.path().join("half.mlom");
    std::fs::rename(dir.path().join("run/final.mlom"), &ckpt).unwrap();
    let o = mlomae(&["train", "--config", &cfg, "--strict", "--resume", ckpt.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("run/metrics.csv")).unwrap(), full);
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2, "lr_e = quick\n");
    let o = mlomae(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains(":15: lr_e:"), "{}", stderr(&o));
}

#[test]
fn missing_files_are_io_errors() {
    assert_eq!(code(&mlomae(&["train", "--config", "/nonexistent/run.cfg"])), 2);
    assert_eq!(code(&mlomae(&["probe", "--ckpt", "/nonexistent.mlom", "--data", "synthetic"])), 2);
}

#[test]
fn divergence_exits_with_numeric_abort() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2, "lr_e = 1e200\noracle_mode = true\n");
    let o = mlomae(&["train", "--config", &cfg]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("at step"));
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0, "");
    let o = Command::new(BIN).args(["train", "--config", &cfg]).env("MLOMAE_SEED", "77").output().unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let written = std::fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(written.contains("seed = 77\n"));
    let bad = Command::new(BIN).args(["train", "--config", &cfg]).env("MLOMAE_SEED", "x").output().unwrap();
    assert_eq!(code(&bad), 1);
}

#[test]
fn probe_and_visualize_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 2, "");
    assert_eq!(code(&mlomae(&["train", "--config", &cfg])), 0);
    let ckpt = dir.path().join("run/final.mlom");
    let bundle = format!("bundle:{}", dir.path().join("run/data.mlom").display());
    let probe = || mlomae(&["probe", "--ckpt", ckpt.to_str().unwrap(), "--data", &bundle, "--steps", "50"]);
    let a = probe();
    assert_eq!(code(&a), 0, "{}", stderr(&a));
    assert!(stdout(&a).contains("val_accuracy"));
    assert_eq!(stdout(&a), stdout(&probe()));

    let out = dir.path().join("vis");
    let o = mlomae(&[
        "visualize",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--data",
        &bundle,
        "--count",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for name in ["sigma_000.pgm", "mask_000.pgm", "sigma_001.pgm", "mask_001.pgm"] {
        let bytes = std::fs::read(out.join(name)).unwrap();
        assert!(bytes.starts_with(b"P5\n4 4\n255\n"), "{name}");
        assert_eq!(bytes.len(), 11 + 16);
    }
}

#[test]
fn probe_rejects_mismatched_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 0, "");
    assert_eq!(code(&mlomae(&["train", "--config", &cfg])), 0);
    let ckpt = dir.path().join("run/final.mlom");
    // default synthetic data is 16×16, the checkpoint expects 4×4 images
    let other = tempfile::tempdir().unwrap();
    let big = other.path().join("big.cfg");
    std::fs::write(&big, format!("total_epochs = 0\nout_dir = {}\n", other.path().join("r").display())).unwrap();
    assert_eq!(code(&mlomae(&["train", "--config", big.to_str().unwrap()])), 0);
    let sel = format!("bundle:{}", other.path().join("r/data.mlom").display());
    let o = mlomae(&["probe", "--ckpt", ckpt.to_str().unwrap(), "--data", &sel]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}
