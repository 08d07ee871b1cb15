//! SGD training with Nesterov momentum, linear warmup and per-epoch cosine
//! annealing, plus evaluation, metrics and checkpoints.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::data::{augment, batch_tensor, epoch_order, epoch_rng, AugmentConfig, DatasetSplit};
use crate::error::{Error, Result};
use crate::model::{Model, Primitive};
use crate::tensor::{Float, Graph, Parameter, Tensor};

pub const METRICS_HEADER: &str = "epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds,spans_json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub lr0: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub precision: Precision,
    pub span_l1: f64,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn for_primitive(p: Primitive) -> Self {
        let (lr0, weight_decay) = match p {
            Primitive::Conv => (0.2, 1e-4),
            Primitive::Fixed | Primitive::Adaptive => (0.05, 5e-4),
        };
        Self {
            epochs: 100,
            batch_size: 50,
            warmup_epochs: 10,
            momentum: 0.9,
            lr0,
            weight_decay,
            seed: 0,
            precision: Precision::F32,
            span_l1: 0.0,
            augment: AugmentConfig::default(),
        }
    }

    /// Shortens the warmup to `epochs / 10` when it would not fit.
    pub fn resolved(mut self) -> Self {
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            self.warmup_epochs = self.epochs / 10;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad("warmup must be shorter than training");
        }
        if self.batch_size < 2 {
            return bad("batch size must be at least 2 for batch statistics");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.span_l1 < 0.0 {
            return bad("penalties must be non-negative");
        }
        Ok(())
    }
}

/// Learning rate of `epoch` (0-based).
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::EpochOutOfRange {
            epoch,
            epochs: cfg.epochs,
        });
    }
    let (lr0, warm) = (cfg.lr0, cfg.warmup_epochs);
    if epoch < warm {
        return Ok(lr0 * (epoch + 1) as f64 / warm as f64);
    }
    if warm >= cfg.epochs {
        return Err(Error::InvalidConfig("warmup must be shorter than training".into()));
    }
    let t = (epoch - warm) as f64 / (cfg.epochs - warm) as f64;
    Ok(0.5 * lr0 * (1.0 + (PI * t).cos()))
}

/// One Nesterov update: `g' = g + wd p`, `v = mu v + g'`,
/// `p -= lr (g' + mu v)`. Decay is skipped for parameters that opt out.
pub fn sgd_nesterov_step<T: Float>(
    param: &mut Parameter<T>,
    grad: &Tensor<T>,
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.shape() != param.value.shape() || velocity.len() != param.numel() {
        return Err(Error::ShapeMismatch(format!(
            "gradient {:?} for parameter {:?}",
            grad.shape(),
            param.value.shape()
        )));
    }
    let wd = T::from_f64(if param.decay { weight_decay } else { 0.0 });
    let (mu, lr) = (T::from_f64(momentum), T::from_f64(lr));
    for ((p, &g), v) in param
        .value
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.iter_mut())
    {
        let gd = g + wd * *p;
        *v = mu * *v + gd;
        *p -= lr * (gd + mu * *v);
    }
    Ok(())
}

/// Velocity buffers for every parameter of a model, in canonical order.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(model: &Model<T>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.params().iter().map(|(_, p)| vec![T::zero(); p.numel()]).collect(),
        }
    }

    /// Applies the gradients held by `g` to every trainable parameter.
    pub fn step(&mut self, model: &mut Model<T>, g: &Graph<T>, lr: f64) -> Result<()> {
        let grads: Vec<Option<Tensor<T>>> = model.params().iter().map(|(_, p)| g.param_grad(p).cloned()).collect();
        for (((name, p), grad), v) in model.params_mut().into_iter().zip(grads).zip(&mut self.velocity) {
            if !p.requires_grad {
                continue;
            }
            let grad = grad.ok_or(Error::MissingGradient(name))?;
            sgd_nesterov_step(p, &grad, v, lr, self.momentum, self.weight_decay)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub seconds: f64,
    /// Per-layer per-head spans after the epoch.
    pub spans: Vec<Vec<f64>>,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.3},\"{}\"",
            self.epoch,
            self.train_loss,
            self.train_acc,
            self.val_loss,
            self.val_acc,
            self.lr,
            self.seconds,
            serde_json::to_string(&self.spans).unwrap_or_default()
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub test_acc: Option<f64>,
    /// Set when the run stopped early on request.
    pub interrupted: bool,
}

/// Where a run writes metrics and checkpoints.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Extra manifest entries stored with every checkpoint.
    pub extra: BTreeMap<String, String>,
}

impl RunOutput {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            extra: BTreeMap::new(),
        }
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn best_path(&self) -> PathBuf {
        self.dir.join("best.ckpt")
    }

    pub fn last_path(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }

    fn checkpoint<T: Float>(
        &self,
        model: &Model<T>,
        epoch: usize,
        metrics: serde_json::Value,
        path: &Path,
    ) -> Result<()> {
        let meta = CheckpointMeta {
            config: model.config.clone(),
            epoch,
            metrics,
            extra: self.extra.clone(),
        };
        save_checkpoint(model, &meta, path)
    }
}

fn argmax<T: Float>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| argmax(&logits.data()[r * k..(r + 1) * k]) == l)
        .count()
}

/// Mean loss and top-1 accuracy in eval mode.
pub fn evaluate<T: Float>(model: &mut Model<T>, split: &DatasetSplit, batch_size: usize) -> Result<(f64, f64)> {
    if split.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut loss, mut correct) = (0.0, 0);
    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let (pixels, labels) = split.batch(chunk);
        let mut g = Graph::inference();
        let x = g.constant(batch_tensor::<T>(&pixels, chunk.len())?);
        let logits = model.forward(&mut g, x, false)?;
        let ce = g.cross_entropy(logits, &labels)?;
        loss += g.value(ce).item()?.as_f64() * chunk.len() as f64;
        correct += count_correct(g.value(logits), &labels);
    }
    Ok((loss / split.len() as f64, correct as f64 / split.len() as f64))
}

/// One pass over `train` in shuffled batches. Returns `(mean loss, acc)`,
/// or `None` when `stop` was raised before the pass finished.
pub fn train_epoch<T: Float>(
    model: &mut Model<T>,
    opt: &mut Sgd<T>,
    train: &DatasetSplit,
    cfg: &TrainConfig,
    epoch: usize,
    lr: f64,
    stop: Option<&AtomicBool>,
) -> Result<Option<(f64, f64)>> {
    let order = epoch_order(train.len(), cfg.seed, epoch);
    let mut aug_rng = epoch_rng(cfg.seed, epoch, 1);
    let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        if stop.is_some_and(|s| s.load(Ordering::Relaxed)) {
            return Ok(None);
        }
        if chunk.len() < 2 {
            continue;
        }
        let (mut pixels, labels) = train.batch(chunk);
        augment(&mut pixels, &mut aug_rng, &cfg.augment);
        let mut g = Graph::new();
        let x = g.constant(batch_tensor::<T>(&pixels, chunk.len())?);
        let logits = model.forward(&mut g, x, true)?;
        let mut loss = g.cross_entropy(logits, &labels)?;
        if cfg.span_l1 > 0.0 {
            if let Some(s) = model.span_sum(&mut g) {
                let pen = g.mul_scalar(s, T::from_f64(cfg.span_l1));
                loss = g.add(loss, pen)?;
            }
        }
        let lv = g.value(loss).item()?.as_f64();
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                batch: bi,
                loss: lv,
            });
        }
        loss_sum += lv * chunk.len() as f64;
        correct += count_correct(g.value(logits), &labels);
        seen += chunk.len();
        g.backward(loss)?;
        opt.step(model, &g, lr)?;
        model.project_spans();
    }
    let n = seen.max(1) as f64;
    Ok(Some((loss_sum / n, correct as f64 / n)))
}

/// Full training run. With an output directory, appends one CSV row per
/// epoch and keeps `best.ckpt` (highest val accuracy) and `last.ckpt`.
/// Raising `stop` ends the run after the current batch; `last.ckpt` then
/// holds the interrupted state.
pub fn train<T: Float>(
    model: &mut Model<T>,
    train: &DatasetSplit,
    val: &DatasetSplit,
    cfg: &TrainConfig,
    out: Option<&RunOutput>,
    stop: Option<&AtomicBool>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<RunMetrics> {
    cfg.validate()?;
    let mut metrics = RunMetrics::default();
    let mut csv: Option<File> = None;
    if let Some(o) = out {
        fs::create_dir_all(&o.dir)?;
        let mut f = File::create(o.metrics_path())?;
        writeln!(f, "{METRICS_HEADER}")?;
        csv = Some(f);
        o.checkpoint(model, 0, serde_json::Value::Null, &o.last_path())?;
    }
    let mut opt = Sgd::new(model, cfg.momentum, cfg.weight_decay);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_schedule(epoch, cfg)?;
        let step = match train_epoch(model, &mut opt, train, cfg, epoch, lr, stop) {
            Err(e @ Error::NonFiniteLoss { .. }) => {
                if let Some(o) = out {
                    let snap = serde_json::json!({
                        "error": e.to_string(),
                        "spans": model.span_snapshot(),
                        "completed_epochs": metrics.epochs.len(),
                    });
                    fs::write(o.dir.join("diagnostic.json"), serde_json::to_string_pretty(&snap)?)?;
                }
                return Err(e);
            }
            r => r?,
        };
        let Some((train_loss, train_acc)) = step else {
            if let Some(o) = out {
                let snap = serde_json::json!({ "interrupted_in_epoch": epoch + 1 });
                o.checkpoint(model, epoch, snap, &o.last_path())?;
            }
            metrics.interrupted = true;
            break;
        };
        let (val_loss, val_acc) = evaluate(model, val, cfg.batch_size)?;
        let row = EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lr,
            seconds: start.elapsed().as_secs_f64(),
            spans: model.span_snapshot(),
        };
        on_epoch(&row);
        let improved = metrics.best_val_acc.is_none_or(|b| val_acc > b);
        if improved {
            metrics.best_val_acc = Some(val_acc);
            metrics.best_epoch = Some(epoch + 1);
        }
        if let Some(o) = out {
            if let Some(f) = csv.as_mut() {
                writeln!(f, "{}", row.csv_row())?;
                f.flush()?;
            }
            let snap = serde_json::to_value(&row)?;
            if improved {
                o.checkpoint(model, epoch + 1, snap.clone(), &o.best_path())?;
            }
            o.checkpoint(model, epoch + 1, snap, &o.last_path())?;
        }
        metrics.epochs.push(row);
    }
    Ok(metrics)
}
