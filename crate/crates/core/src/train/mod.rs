//! Multi-objective training: one-cycle schedule, train step, evaluation,
//! metrics and checkpoints.

mod checkpoint;
mod optim;

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EquivBatch};
use crate::equiv::{equiv_meter, network_equiv_terms, total_objective, weigh_layers, EquivConfig, LayerMaps};
use crate::error::{Error, Result};
use crate::group::GroupSpec;
use crate::model::Model;
use crate::nn::{GroupLayout, Mode};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::util::derive_seed;

pub use checkpoint::{Checkpoint, RngState, MAGIC, VERSION};
pub use optim::{Optimizer, OptimizerKind};

fn default_lr_min() -> f64 {
    1e-5
}
fn default_lr_max() -> f64 {
    5e-3
}
fn default_batch() -> usize {
    64
}
fn default_decay() -> f64 {
    1e-7
}
fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Compressed desk-scale schedule: cycle 13, rise 4, tail 2 epochs.
    #[serde(default)]
    pub mini_profile: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_cycle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs_tail: Option<f64>,
    /// Rise length; a quarter of the cycle when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rise_epochs: Option<f64>,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_lr_max")]
    pub lr_max: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Decoupled weight decay.
    #[serde(default = "default_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mini_profile: false,
            epochs_cycle: None,
            epochs_tail: None,
            rise_epochs: None,
            lr_min: default_lr_min(),
            lr_max: default_lr_max(),
            batch_size: default_batch(),
            optimizer: OptimizerKind::default(),
            weight_decay: default_decay(),
            seed: default_seed(),
        }
    }
}

impl TrainConfig {
    pub fn mini() -> Self {
        TrainConfig {
            mini_profile: true,
            ..Default::default()
        }
    }

    pub fn cycle(&self) -> f64 {
        self.epochs_cycle.unwrap_or(if self.mini_profile { 13.0 } else { 70.0 })
    }

    pub fn tail(&self) -> f64 {
        self.epochs_tail.unwrap_or(if self.mini_profile { 2.0 } else { 20.0 })
    }

    pub fn rise(&self) -> f64 {
        self.rise_epochs
            .unwrap_or(if self.mini_profile { 4.0 } else { self.cycle() / 4.0 })
    }

    /// Whole epochs in the schedule.
    pub fn total_epochs(&self) -> u64 {
        (self.cycle() + self.tail()).ceil() as u64
    }

    pub fn validate(&self) -> Result<()> {
        let err = |key: &str, reason: String| {
            Err(Error::Config {
                key: format!("train.{key}"),
                reason,
            })
        };
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return err("lr_min", format!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.batch_size < 2 {
            return err("batch_size", format!("batch norm needs at least 2, got {}", self.batch_size));
        }
        if !(self.cycle() > 0.0) {
            return err("epochs_cycle", format!("{} is not positive", self.cycle()));
        }
        if !(self.rise() > 0.0 && self.rise() < self.cycle()) {
            return err("rise_epochs", format!("{} is not inside the {} epoch cycle", self.rise(), self.cycle()));
        }
        if !(self.tail() >= 0.0) {
            return err("epochs_tail", format!("{} is negative", self.tail()));
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay", format!("{} is negative", self.weight_decay));
        }
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                    return err("optimizer", "adam needs 0 <= beta < 1 and eps > 0".into());
                }
            }
            OptimizerKind::Sgd { momentum } => {
                if !(0.0..1.0).contains(&momentum) {
                    return err("optimizer", format!("sgd momentum {momentum} outside [0, 1)"));
                }
            }
        }
        Ok(())
    }
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

/// Learning rate at fractional epoch `e`: linear rise from `lr_min` to
/// `lr_max`, linear fall back to `lr_min` at the end of the cycle, then
/// constant through the tail.
pub fn one_cycle_lr(e: f64, cfg: &TrainConfig) -> Result<f64> {
    let (rise, cycle) = (cfg.rise(), cfg.cycle());
    let total = cycle + cfg.tail();
    if !(0.0..=total).contains(&e) {
        return Err(Error::ScheduleExhausted { epoch: e, total });
    }
    Ok(if e <= rise {
        lerp(cfg.lr_min, cfg.lr_max, e / rise)
    } else if e <= cycle {
        lerp(cfg.lr_max, cfg.lr_min, (e - rise) / (cycle - rise))
    } else {
        cfg.lr_min
    })
}

/// Loss components of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepMetrics {
    pub primary: f64,
    /// Unweighted loss per monitored layer, summed over elements and groups.
    pub equiv_layers: Vec<(usize, f64)>,
    /// `L_G` (β-weighted, summed over elements) per group.
    pub equiv_groups: Vec<(String, f64)>,
    pub total: f64,
}

fn finite<T: Scalar>(tape: &Tape<T>, v: Var, name: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(name()))
    }
}

/// One optimizer step on `batch` (the original plus its transformed copies).
///
/// Inputs of equal extent are forwarded as one concatenated batch, so batch
/// norm sees the original and its copies together. The primary loss is the
/// mean cross entropy over all of them.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut Optimizer<T>,
    batch: &EquivBatch<T>,
    equiv: &EquivConfig,
    lr: f64,
) -> Result<StepMetrics> {
    let b = batch.labels.len();
    let monitored = equiv.monitored_layers();
    let layouts: Vec<Option<GroupLayout>> = (0..model.num_blocks()).map(|i| model.block_layout(i).cloned()).collect();
    let items: Vec<&Tensor<T>> = std::iter::once(&batch.x_q).chain(batch.copies.iter().map(|c| &c.x_p)).collect();

    let mut buckets: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for (i, x) in items.iter().enumerate() {
        let hw = x.shape()[2..].to_vec();
        match buckets.iter_mut().find(|(k, _)| *k == hw) {
            Some((_, ids)) => ids.push(i),
            None => buckets.push((hw, vec![i])),
        }
    }

    let mut tape = Tape::new();
    let mut maps: Vec<LayerMaps> = vec![LayerMaps::default(); items.len()];
    let mut forwards = Vec::with_capacity(buckets.len());
    let mut ces = Vec::with_capacity(buckets.len());
    for (_, ids) in &buckets {
        let x = if ids.len() == 1 {
            items[ids[0]].clone()
        } else {
            Tensor::concat(&ids.iter().map(|&i| items[i]).collect::<Vec<_>>())?
        };
        let xv = tape.constant(x);
        let fwd = model.forward(&mut tape, xv, Mode::Train, true)?;
        finite(&tape, fwd.logits, || "logits".into())?;
        let labels: Vec<usize> = ids.iter().flat_map(|_| batch.labels.iter().copied()).collect();
        ces.push((tape.softmax_cross_entropy(fwd.logits, &labels)?, ids.len()));
        for &layer in &monitored {
            let pooled = model.pooled(&mut tape, &fwd, layer)?;
            for (pos, &item) in ids.iter().enumerate() {
                let part = if ids.len() == 1 { pooled } else { tape.narrow(pooled, pos * b, b)? };
                maps[item].maps.insert(layer, part);
            }
        }
        forwards.push(fwd);
    }
    for (c, m) in batch.copies.iter().zip(&mut maps[1..]) {
        m.input_mask = (!c.mask.is_all_true()).then(|| c.mask.clone());
    }

    let primary = if ces.len() == 1 {
        ces[0].0
    } else {
        let weights: Vec<(Var, T)> = ces
            .iter()
            .map(|(v, n)| (*v, T::lit(*n as f64 / items.len() as f64)))
            .collect();
        tape.weighted_sum(&weights)?
    };
    finite(&tape, primary, || "primary loss".into())?;

    let mut layer_sums: Vec<(usize, f64)> = monitored.iter().map(|l| (*l, 0.0)).collect();
    let mut per_group: Vec<(String, Vec<Var>)> = Vec::new();
    for (k, copy) in batch.copies.iter().enumerate() {
        let terms = network_equiv_terms(&mut tape, &maps[k + 1], &maps[0], &copy.element, equiv, &layouts)?;
        for (layer, v) in &terms {
            finite(&tape, *v, || format!("equivariance loss at layer {layer} for {}", copy.element))?;
            let slot = layer_sums.iter_mut().find(|(l, _)| l == layer).expect("monitored layer");
            slot.1 += tape.value(*v).item().as_f64();
        }
        let weighted = weigh_layers(&mut tape, &terms, equiv)?;
        match per_group.iter_mut().find(|(g, _)| *g == copy.group) {
            Some((_, vs)) => vs.push(weighted),
            None => per_group.push((copy.group.clone(), vec![weighted])),
        }
    }
    let mut group_losses = Vec::with_capacity(per_group.len());
    for (name, vs) in per_group {
        let ones: Vec<(Var, T)> = vs.into_iter().map(|v| (v, T::one())).collect();
        group_losses.push((name, tape.weighted_sum(&ones)?));
    }
    let total = total_objective(&mut tape, primary, &group_losses, equiv)?;
    finite(&tape, total, || "total objective".into())?;
    tape.backward(total)?;

    let n_params = forwards[0].params.len();
    let mut grads: Vec<Tensor<T>> = Vec::with_capacity(n_params);
    for j in 0..n_params {
        let mut g = tape
            .take_grad(forwards[0].params[j])
            .unwrap_or_else(|| Tensor::zeros(tape.shape(forwards[0].params[j])));
        for fwd in &forwards[1..] {
            if let Some(extra) = tape.grad(fwd.params[j]) {
                g.data_mut().iter_mut().zip(extra.data()).for_each(|(a, e)| *a += *e);
            }
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", model.params()[j].0)));
        }
        grads.push(g);
    }
    opt.step(model.params_mut(), &grads, lr)?;
    for fwd in &forwards {
        model.apply_batch_stats(fwd);
    }

    Ok(StepMetrics {
        primary: tape.value(primary).item().as_f64(),
        equiv_layers: layer_sums,
        equiv_groups: group_losses
            .iter()
            .map(|(n, v)| (n.clone(), tape.value(*v).item().as_f64()))
            .collect(),
        total: tape.value(total).item().as_f64(),
    })
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let &[n, k] = logits.shape() else {
        return Err(Error::shape("accuracy", format!("logits {:?}", logits.shape())));
    };
    if n != labels.len() {
        return Err(Error::shape("accuracy", format!("{n} rows for {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let mut best = 0;
        for j in 1..k {
            if row[j] > row[best] {
                best = j;
            }
        }
        correct += usize::from(best == label);
    }
    Ok(correct as f64 / n as f64)
}

const EVAL_CHUNK: usize = 250;

/// Eval-mode accuracy over a whole dataset.
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, labels) = data.gather::<T>(chunk)?;
        correct += accuracy(&model.predict(&x)?, &labels)? * chunk.len() as f64;
    }
    Ok(correct / data.len() as f64)
}

/// CSV header for a run monitoring `layers`.
pub fn metrics_header(layers: &[usize]) -> String {
    let mut h = String::from("step,epoch,lr,primary");
    for l in layers {
        h.push_str(&format!(",equiv_l{l}"));
    }
    h.push_str(",total\n");
    h
}

/// One metrics CSV row.
pub fn metrics_row(step: u64, epoch: f64, lr: f64, m: &StepMetrics) -> String {
    let mut r = format!("{step},{epoch},{lr},{}", m.primary);
    for (_, v) in &m.equiv_layers {
        r.push_str(&format!(",{v}"));
    }
    r.push_str(&format!(",{}\n", m.total));
    r
}

/// Training state: model, optimizer and schedule position.
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: Optimizer<T>,
    pub config: TrainConfig,
    pub equiv: EquivConfig,
    epoch: u64,
    step: u64,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, equiv: EquivConfig) -> Result<Self> {
        config.validate()?;
        equiv.validate(&model)?;
        let params = model.params();
        let shapes: Vec<&[usize]> = params.iter().map(|(_, t)| t.shape()).collect();
        let optimizer = Optimizer::new(config.optimizer, config.weight_decay, &shapes);
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x5eed));
        Ok(Trainer {
            model,
            optimizer,
            config,
            equiv,
            epoch: 0,
            step: 0,
            rng,
        })
    }

    /// Epochs completed.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.total_epochs()
    }

    /// Runs one epoch over `train`, writing one CSV row per step to `csv`.
    /// Returns the mean primary loss.
    pub fn run_epoch(&mut self, train: &Dataset, csv: &mut dyn Write) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let shuffle_seed = self.rng.next_u64();
        let batches = train.batches(self.config.batch_size, shuffle_seed, self.epoch);
        if batches.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut primary = 0.0;
        for (i, idx) in batches.iter().enumerate() {
            let e = self.epoch as f64 + i as f64 / batches.len() as f64;
            let lr = one_cycle_lr(e.min(self.config.cycle() + self.config.tail()), &self.config)?;
            let (x, labels) = train.gather::<T>(idx)?;
            let batch = EquivBatch::for_groups(x, labels, &self.equiv.groups, self.equiv.policy, self.step)?;
            let m = train_step(&mut self.model, &mut self.optimizer, &batch, &self.equiv, lr)?;
            csv.write_all(metrics_row(self.step, e, lr, &m).as_bytes())
                .map_err(|e| Error::io("metrics", e))?;
            primary += m.primary;
            self.step += 1;
        }
        self.epoch += 1;
        Ok(primary / batches.len() as f64)
    }

    /// Snapshot of weights, running statistics, optimizer state and RNG.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut tensors: Vec<(String, Tensor<T>)> = Vec::new();
        for (n, t) in self.model.params().into_iter().chain(self.model.buffers()) {
            tensors.push((n, t.clone()));
        }
        for (n, t) in self.optimizer.state() {
            tensors.push((n, t.clone()));
        }
        tensors.push(("opt.steps".into(), Tensor::scalar(T::lit(self.optimizer.steps as f64))));
        Checkpoint {
            config_hash: self.model.config().hash(),
            epoch: self.epoch,
            step: self.step,
            tensors,
            rng: RngState::capture(&self.rng),
        }
    }

    /// Restores a snapshot taken from a trainer with the same model config.
    pub fn restore(&mut self, ck: &Checkpoint<T>) -> Result<()> {
        ck.check_hash(self.model.config().hash())?;
        let names: Vec<String> = self
            .model
            .params()
            .into_iter()
            .chain(self.model.buffers())
            .map(|(n, _)| n)
            .chain(self.optimizer.state().into_iter().map(|(n, _)| n))
            .collect();
        let lookup = |name: &str| -> Result<Tensor<T>> {
            ck.tensor(name)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))
        };
        let values: Vec<Tensor<T>> = names.iter().map(|n| lookup(n)).collect::<Result<_>>()?;
        let mut it = values.into_iter();
        for (p, v) in self.model.params_mut().into_iter().zip(&mut it) {
            assign(p, v)?;
        }
        for (p, v) in self.model.buffers_mut().into_iter().zip(&mut it) {
            assign(p, v)?;
        }
        for (p, v) in self.optimizer.state_mut().into_iter().zip(&mut it) {
            assign(p, v)?;
        }
        self.optimizer.steps = lookup("opt.steps")?.item().as_f64() as u64;
        self.epoch = ck.epoch;
        self.step = ck.step;
        self.rng = ck.rng.restore();
        Ok(())
    }
}

fn assign<T: Scalar>(slot: &mut Tensor<T>, value: Tensor<T>) -> Result<()> {
    if slot.shape() != value.shape() {
        return Err(Error::shape(
            "checkpoint restore",
            format!("{:?} vs {:?}", slot.shape(), value.shape()),
        ));
    }
    *slot = value;
    Ok(())
}

/// Per-epoch record of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_primary: f64,
    pub val_accuracy: f64,
}

/// Meter reading (`L_G` per layer) after `epoch` completed epochs.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MeterRecord {
    pub epoch: u64,
    pub layers: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    pub best_val_accuracy: f64,
    pub best_epoch: u64,
    pub final_val_accuracy: f64,
    pub meter: Vec<MeterRecord>,
}

/// Where and how often [`fit`] meters equivariance.
pub struct MeterPlan<'a, T> {
    pub sample: &'a Tensor<T>,
    pub spec: &'a GroupSpec,
}

fn meter_layers<T: Scalar>(model: &Model<T>, plan: &MeterPlan<'_, T>, epoch: u64) -> Result<MeterRecord> {
    let layers: Vec<usize> = (0..model.num_blocks()).filter(|&b| model.block_layout(b).is_some()).collect();
    let report = equiv_meter(model, plan.sample, plan.spec, &layers)?;
    Ok(MeterRecord {
        epoch,
        layers: report.layers.iter().map(|l| (l.layer, l.total)).collect(),
    })
}

/// Trains until `until` epochs are complete (the schedule length when
/// `None`), evaluating on `val` after every epoch. With a meter plan the
/// meter runs before the first epoch of a fresh run and after every epoch.
/// `on_epoch` sees the trainer after each epoch (for checkpoints).
pub fn fit<T: Scalar>(
    trainer: &mut Trainer<T>,
    train: &Dataset,
    val: &Dataset,
    meter: Option<&MeterPlan<'_, T>>,
    until: Option<u64>,
    csv: &mut dyn Write,
    on_epoch: &mut dyn FnMut(&Trainer<T>) -> Result<()>,
) -> Result<RunSummary> {
    let until = until.unwrap_or(trainer.config.total_epochs()).min(trainer.config.total_epochs());
    let monitored = trainer.equiv.monitored_layers();
    if trainer.step == 0 {
        csv.write_all(metrics_header(&monitored).as_bytes())
            .map_err(|e| Error::io("metrics", e))?;
    }
    let mut epochs = Vec::new();
    let mut meters = Vec::new();
    if let Some(plan) = meter {
        if trainer.epoch == 0 {
            meters.push(meter_layers(&trainer.model, plan, 0)?);
        }
    }
    while trainer.epoch < until {
        let train_primary = trainer.run_epoch(train, csv)?;
        let val_accuracy = evaluate(&trainer.model, val)?;
        epochs.push(EpochRecord {
            epoch: trainer.epoch,
            train_primary,
            val_accuracy,
        });
        if let Some(plan) = meter {
            meters.push(meter_layers(&trainer.model, plan, trainer.epoch)?);
        }
        on_epoch(trainer)?;
    }
    let (best_epoch, best_val_accuracy) = epochs
        .iter()
        .fold((0, f64::NEG_INFINITY), |(be, ba), r| if r.val_accuracy > ba { (r.epoch, r.val_accuracy) } else { (be, ba) });
    Ok(RunSummary {
        seed: trainer.config.seed,
        config_hash: format!("{:016x}", trainer.model.config().hash()),
        final_val_accuracy: epochs.last().map_or(f64::NAN, |r| r.val_accuracy),
        best_val_accuracy,
        best_epoch,
        epochs,
        meter: meters,
    })
}
