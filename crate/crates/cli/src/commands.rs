use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ien_core::config::RunConfig;
use ien_core::data::save_float_images;
use ien_core::equiv::{build_c4_oracle, equiv_meter};
use ien_core::gradcheck::{check_all_ops, DEFAULT_EPS, DEFAULT_TOL};
use ien_core::train::{evaluate, fit, Checkpoint, MeterPlan, Trainer};
use ien_core::{GroupSpec, Tensor};

use crate::manifest::RunManifest;
use crate::{CheckFailed, Command, Common};

/// Oracle readings above this fail `oracle-verify`.
const ORACLE_LIMIT: f64 = 1e-8;

pub fn run(command: &Command, common: &Common, manifest: &mut RunManifest) -> Result<()> {
    manifest.seed = common.seed;
    match command {
        Command::GenData => gen_data(common, manifest),
        Command::Train { until } => train(common, *until, manifest),
        Command::Eval => eval(common, manifest),
        Command::Meter => meter(common, manifest),
        Command::Gradcheck => gradcheck(common, manifest),
        Command::OracleVerify {
            layers,
            base_filters,
            inputs,
        } => oracle_verify(common, *layers, *base_filters, *inputs, manifest),
    }
}

fn load_config(common: &Common, manifest: &mut RunManifest) -> Result<RunConfig> {
    let Some(path) = &common.config else {
        bail!("--config is required for this command");
    };
    let cfg = RunConfig::load(path)?;
    manifest.config = Some(path.display().to_string());
    manifest.config_hash = Some(format!("{:016x}", cfg.model.hash()));
    Ok(cfg)
}

fn write_text(path: PathBuf, text: &str, manifest: &mut RunManifest) -> Result<()> {
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    manifest.output(&path);
    Ok(())
}

fn write_json<T: Serialize>(path: PathBuf, value: &T, manifest: &mut RunManifest) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"), manifest)
}

fn gen_data(common: &Common, manifest: &mut RunManifest) -> Result<()> {
    let mut cfg = load_config(common, manifest)?;
    if let Some(s) = common.seed {
        cfg.data.synth_seed = s;
    }
    let data = cfg.synthesize(&cfg.load_base()?)?;
    let stem = cfg.data.synth.clone();
    let (img, lab) = data.save(&common.out, &stem)?;
    let float = common.out.join(format!("{stem}-images-f32.idx.gz"));
    save_float_images(&float, &data.images)?;
    for p in [&img, &float, &lab] {
        manifest.output(p);
    }
    println!("wrote {} images to {}", data.len(), common.out.display());
    Ok(())
}

fn checkpoint_path(out: &Path, epoch: u64) -> PathBuf {
    out.join("checkpoints").join(format!("epoch-{epoch:03}.ienc"))
}

fn train(common: &Common, until: Option<u64>, manifest: &mut RunManifest) -> Result<()> {
    let cfg = load_config(common, manifest)?;
    let (train_set, val_set) = cfg.datasets()?;
    let mut trainer = cfg.trainer(common.seed)?;
    manifest.seed = Some(trainer.config.seed);
    if let Some(path) = &common.checkpoint {
        let ck = Checkpoint::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?;
        trainer.restore(&ck)?;
        eprintln!("resumed from {} at epoch {}", path.display(), trainer.epoch());
    }
    fs::create_dir_all(common.out.join("checkpoints"))?;
    write_text(common.out.join("config.toml"), &cfg.canonical(), manifest)?;

    let metrics = common.out.join("metrics.csv");
    let file = if trainer.step() == 0 {
        File::create(&metrics)
    } else {
        OpenOptions::new().append(true).create(true).open(&metrics)
    }
    .with_context(|| format!("opening {}", metrics.display()))?;
    let mut csv = BufWriter::new(file);

    let sample = cfg.meter_sample(&val_set)?;
    let spec = cfg.meter_group()?;
    let plan = MeterPlan {
        sample: &sample,
        spec: &spec,
    };
    let out = common.out.clone();
    let mut on_epoch = |t: &Trainer<f32>| -> ien_core::Result<()> {
        t.checkpoint().save(checkpoint_path(&out, t.epoch()))?;
        eprintln!("epoch {} done (step {})", t.epoch(), t.step());
        Ok(())
    };
    let result = fit(&mut trainer, &train_set, &val_set, Some(&plan), until, &mut csv, &mut on_epoch);
    csv.flush()?;
    manifest.output(&metrics);
    let summary = result?;
    if let Some(last) = summary.epochs.last() {
        manifest.output(&checkpoint_path(&common.out, last.epoch));
        println!(
            "epoch {}: val accuracy {:.4} (best {:.4} at epoch {})",
            last.epoch, last.val_accuracy, summary.best_val_accuracy, summary.best_epoch
        );
    }
    write_json(common.out.join("summary.json"), &summary, manifest)
}

fn restored(cfg: &RunConfig, common: &Common) -> Result<Trainer<f32>> {
    let mut trainer = cfg.trainer(common.seed)?;
    if let Some(path) = &common.checkpoint {
        let ck = Checkpoint::<f32>::load(path).with_context(|| format!("loading {}", path.display()))?;
        trainer.restore(&ck)?;
    }
    Ok(trainer)
}

#[derive(Serialize)]
struct EvalRecord {
    checkpoint: String,
    config_hash: String,
    val_size: usize,
    accuracy: f64,
}

fn eval(common: &Common, manifest: &mut RunManifest) -> Result<()> {
    let cfg = load_config(common, manifest)?;
    let Some(path) = &common.checkpoint else {
        bail!("eval needs --checkpoint");
    };
    let trainer = restored(&cfg, common)?;
    let (_, val) = cfg.datasets()?;
    let accuracy = evaluate(&trainer.model, &val)?;
    println!("validation accuracy {accuracy:.4} on {} images", val.len());
    let record = EvalRecord {
        checkpoint: path.display().to_string(),
        config_hash: format!("{:016x}", cfg.model.hash()),
        val_size: val.len(),
        accuracy,
    };
    write_json(common.out.join("eval.json"), &record, manifest)
}

fn meter(common: &Common, manifest: &mut RunManifest) -> Result<()> {
    let cfg = load_config(common, manifest)?;
    let trainer = restored(&cfg, common)?;
    let (_, val) = cfg.datasets()?;
    let sample = cfg.meter_sample(&val)?;
    let spec = cfg.meter_group()?;
    let model = &trainer.model;
    let layers: Vec<usize> = (0..model.num_blocks()).filter(|&b| model.block_layout(b).is_some()).collect();
    let name = common
        .checkpoint
        .as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_else(|| "untrained".into());
    let report = equiv_meter(model, &sample, &spec, &layers)?.with_metadata(name, trainer.config.seed);
    for l in &report.layers {
        println!(
            "layer {}: L = {:.3e} (mean {:.3e}, magnitude 10^{})",
            l.layer,
            l.total,
            l.mean,
            l.magnitude.map_or("-inf".to_string(), |m| m.to_string())
        );
    }
    write_text(common.out.join("report.csv"), &report.to_csv(), manifest)?;
    write_text(common.out.join("report.json"), &(report.to_json() + "\n"), manifest)
}

fn gradcheck(common: &Common, manifest: &mut RunManifest) -> Result<()> {
    let seed = common.seed.unwrap_or(1);
    manifest.seed = Some(seed);
    let checks = check_all_ops(seed, DEFAULT_EPS, DEFAULT_TOL)?;
    println!("{:<26} {:<34} {:>10}  result", "op", "shapes", "max err");
    for c in &checks {
        let verdict = if c.passed { "pass" } else { "FAIL" };
        println!("{:<26} {:<34} {:>10.2e}  {verdict}", c.op, c.shape, c.max_err);
    }
    write_json(common.out.join("gradcheck.json"), &checks, manifest)?;
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(CheckFailed(format!("{failed} of {} gradient checks failed", checks.len())).into());
    }
    println!("all {} checks pass (tolerance {DEFAULT_TOL:e})", checks.len());
    Ok(())
}

fn oracle_verify(
    common: &Common,
    layers: usize,
    base_filters: usize,
    inputs: usize,
    manifest: &mut RunManifest,
) -> Result<()> {
    let seed = common.seed.unwrap_or(1);
    manifest.seed = Some(seed);
    if inputs == 0 {
        bail!("--inputs must be positive");
    }
    let model = build_c4_oracle(seed, base_filters, layers)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..inputs * 28 * 28).map(|_| rng.random::<f64>()).collect();
    let x = Tensor::from_vec(&[inputs, 1, 28, 28], data)?;
    let spec = GroupSpec::rotation(4)?;
    let monitored: Vec<usize> = (0..model.num_blocks()).collect();
    let report = equiv_meter(&model, &x, &spec, &monitored)?.with_metadata("c4-oracle", seed);
    for l in &report.layers {
        for e in &l.elements {
            println!("layer {} {}: {:.3e}", l.layer, e.element, e.mse);
        }
    }
    write_text(common.out.join("report.csv"), &report.to_csv(), manifest)?;
    write_text(common.out.join("report.json"), &(report.to_json() + "\n"), manifest)?;
    let worst = report.max_mse();
    if worst > ORACLE_LIMIT {
        return Err(CheckFailed(format!("oracle reading {worst:.3e} exceeds {ORACLE_LIMIT:e}")).into());
    }
    println!("oracle equivariant: max reading {worst:.3e}");
    Ok(())
}
