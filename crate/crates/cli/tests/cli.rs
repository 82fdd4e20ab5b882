use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ien(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ien"))
        .args(args)
        .env_remove("IEN_THREADS")
        .output()
        .expect("binary runs")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k")
}

/// A two-block model on a few hundred digits; trains in seconds.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let data = data_dir();
    let text = format!(
        r#"version = 1

[data]
images = "{}"
labels = "{}"
train = 128
val = 64
meter_sample = 16

[model]
input = [1, 28, 28]
classes = 10
layout = "R4"
groups = 2
layers = ["conv k=3", "bn", "relu", "maxpool k=2 s=2", "conv k=3", "bn", "relu", "gap", "linear"]

[train]
mini_profile = true
batch_size = 32
{extra}"#,
        data.join("images.idx.gz").display(),
        data.join("labels.idx.gz").display(),
    );
    let path = dir.join("tiny.toml");
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = ien(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn gradcheck_passes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = ien(&["gradcheck", "--seed", "1", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("conv2d") && !table.contains("FAIL"));
    assert!(dir.path().join("gradcheck.json").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gradcheck");
    assert_eq!(manifest["exit_status"], 0);
}

#[test]
fn oracle_verify_reads_zero() {
    let dir = tempfile::tempdir().unwrap();
    let o = ien(&["oracle-verify", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    let readings: Vec<f64> = stdout
        .lines()
        .filter(|l| l.starts_with("layer "))
        .map(|l| l.rsplit(' ').next().unwrap().parse().unwrap())
        .collect();
    // Three layers times four elements, identity included.
    assert_eq!(readings.len(), 12);
    assert!(readings.iter().all(|r| *r <= 1e-10), "{readings:?}");
}

#[test]
fn config_errors_exit_one_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "learning_rate = 0.1\n");
    let o = ien(&["meter", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("learning_rate") && err.contains("line"), "{err}");

    let cfg = tiny_config(dir.path(), "\n[equiv]\nbeta = -1\n");
    let o = ien(&["meter", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("equiv.beta"));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "lr_min = 1e30\nlr_max = 1e35\n");
    let o = ien(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap(), "--until", "1"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"));
}

#[test]
fn train_eval_meter_resume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    let run = |out: &Path, extra: &[&str]| {
        let mut args = vec!["train", "--config", cfg, "--deterministic", "--out", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = ien(&args);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    run(&a, &["--until", "2"]);
    run(&b, &["--until", "2"]);
    let metrics = |d: &Path| fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(metrics(&a), metrics(&b), "deterministic reruns differ");
    for f in ["summary.json", "manifest.json", "config.toml", "checkpoints/epoch-002.ienc"] {
        assert!(a.join(f).exists(), "missing {f}");
    }

    // Stop after one epoch, then resume into the same directory.
    run(&c, &["--until", "1"]);
    let ck = c.join("checkpoints/epoch-001.ienc");
    run(&c, &["--until", "2", "--checkpoint", ck.to_str().unwrap()]);
    assert_eq!(metrics(&a), metrics(&c), "resumed run diverged");
    assert_eq!(
        fs::read(a.join("checkpoints/epoch-002.ienc")).unwrap(),
        fs::read(c.join("checkpoints/epoch-002.ienc")).unwrap()
    );

    let ck = a.join("checkpoints/epoch-002.ienc");
    let o = ien(&["eval", "--config", cfg, "--checkpoint", ck.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("eval.json")).unwrap()).unwrap();
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = ien(&["meter", "--config", cfg, "--checkpoint", ck.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    assert!(report.starts_with("layer,element,mse\n"));
    assert_eq!(report.lines().count(), 1 + 2 * 4);

    // A checkpoint from a different architecture is refused.
    let other = tiny_config(&dir.path().join("a"), "");
    let text = fs::read_to_string(&other).unwrap().replace("groups = 2", "groups = 3");
    fs::write(&other, text).unwrap();
    let o = ien(&["eval", "--config", other.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hash"), "{}", stderr(&o));
}

#[test]
fn gen_data_writes_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let o = ien(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["rot-images.idx.gz", "rot-images-f32.idx.gz", "rot-labels.idx.gz", "manifest.json"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let images = ien_core::data::load_images(dir.path().join("rot-images-f32.idx.gz")).unwrap();
    assert_eq!(images.shape(), &[5000, 1, 28, 28]);
}
