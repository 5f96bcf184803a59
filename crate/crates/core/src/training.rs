//! Joint adaptation of the trainable partition: the rate-distortion term
//! weighted by `λ_rd` plus the weighted task losses, with a step learning
//! rate schedule, single-task baselines and `λ_rd` sweeps.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Session, Var};
use crate::codec::Batcher;
use crate::entropy::QuantMode;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_adapted, EvalPoint};
use crate::multitask::AdaptedCodec;
use crate::optim::Adam;
use crate::synth::{task_loss, Dataset};
use crate::task::canonical_name;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Multitask,
    Singletask(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lambda_rd: f64,
    /// Distortion weight inside the rate-distortion term; matches the
    /// base codec's pretraining value.
    pub lambda: f64,
    pub lr: f64,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Overrides of the per-task weights `w_i`; zero disables a task loss.
    pub task_weights: BTreeMap<String, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_rd: 1.0,
            lambda: 1.0,
            lr: 1e-4,
            decay_epochs: vec![2, 4, 8],
            decay_factor: 0.1,
            epochs: 10,
            batch_size: 8,
            seed: 0,
            mode: TrainMode::Multitask,
            task_weights: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rd > 0.0 && self.lambda_rd.is_finite()) {
            return Err(Error::config("train.lambda_rd", "must be > 0"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("train.lambda", "must be > 0"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be > 0"));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::config("train.decay_factor", "must be in (0, 1)"));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("train.decay_epochs", "must be strictly increasing"));
        }
        if self.decay_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return Err(Error::config("train.decay_epochs", "every decay epoch must be < epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be > 0"));
        }
        for (k, w) in &self.task_weights {
            if !(*w >= 0.0 && w.is_finite()) {
                return Err(Error::config(format!("train.task_weights.{k}"), "must be >= 0"));
            }
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }

    fn weight_for(&self, codec: &AdaptedCodec, k: usize) -> f64 {
        let name = &codec.tasks[k].name;
        self.task_weights
            .iter()
            .find(|(key, _)| canonical_name(key).is_ok_and(|c| &c == name))
            .map_or(codec.tasks[k].weight, |(_, &w)| w)
    }
}

/// Scalar parts of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub rd: f64,
    pub bpp: f64,
    pub mse: f64,
    pub task: BTreeMap<String, f64>,
}

impl LossComponents {
    fn is_finite(&self) -> bool {
        [self.total, self.rd, self.bpp, self.mse].iter().all(|v| v.is_finite())
            && self.task.values().all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &LossComponents, scale: f64) {
        self.total += scale * other.total;
        self.rd += scale * other.rd;
        self.bpp += scale * other.bpp;
        self.mse += scale * other.mse;
        for (k, v) in &other.task {
            *self.task.entry(k.clone()).or_default() += scale * v;
        }
    }
}

/// `λ_rd·(bpp + λ·MSE) + Σ w_i·L_i` on one batch, with the rate taken under
/// training-mode quantization noise.
pub fn total_loss(
    s: &mut Session,
    codec: &AdaptedCodec,
    data: &Dataset,
    idx: &[usize],
    tasks: &[usize],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossComponents)> {
    if tasks.is_empty() {
        return Err(Error::config("tasks", "at least one task must be in scope"));
    }
    let images = data.images_at(idx);
    let (b, h, w, _) = images.nhwc();
    let x = s.constant(images);
    let y = codec.encode_graph(s, x);
    let y_rate = s.quantize(y, QuantMode::Train, rng);
    let y_dec = s.quantize(y, QuantMode::Eval, rng);
    let bits = codec.rate_graph(s, y_rate);
    let bpp = s.scale(bits, 1.0 / (b * h * w) as f64);
    let out = codec.decode_graph(s, y_dec, tasks);
    let mse = s.mse(out.human, x);
    let d = s.scale(mse, cfg.lambda);
    let rd = s.add(bpp, d);
    let mut total = s.scale(rd, cfg.lambda_rd);
    let mut comp = LossComponents {
        rd: s.value(rd).item(),
        bpp: s.value(bpp).item(),
        mse: s.value(mse).item(),
        ..LossComponents::default()
    };
    for &(k, pred) in &out.predictions {
        let spec = &codec.tasks[k];
        let l = task_loss(s, pred, &data.labels(spec.label, idx), spec)?;
        comp.task.insert(spec.name.clone(), s.value(l).item());
        let wl = s.scale(l, cfg.weight_for(codec, k));
        total = s.add(total, wl);
    }
    comp.total = s.value(total).item();
    Ok((total, comp))
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Means over the epoch's training batches.
    pub loss: LossComponents,
    /// Validation metrics after the epoch, if a validation set was given.
    pub metrics: BTreeMap<String, f64>,
}

/// Indices of the tasks trained under `cfg.mode`.
pub fn tasks_in_scope(codec: &AdaptedCodec, cfg: &TrainConfig) -> Result<Vec<usize>> {
    match &cfg.mode {
        TrainMode::Multitask => Ok((0..codec.tasks.len()).collect()),
        TrainMode::Singletask(name) => {
            let k = codec.task_index(name)?;
            if codec.tasks.len() != 1 {
                return Err(Error::config(
                    "train.mode",
                    format!(
                        "single-task mode needs a codec built for `{}` alone, got {} tasks",
                        codec.tasks[k].name,
                        codec.tasks.len()
                    ),
                ));
            }
            Ok(vec![k])
        }
    }
}

/// Trains the codec's adaptor parameters in place. Frozen parameters are
/// never written.
pub fn train_adaptation(
    codec: &mut AdaptedCodec,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    let tasks = tasks_in_scope(codec, cfg)?;
    if train.is_empty() {
        return Err(Error::config("data.train_size", "training set is empty"));
    }
    let steps_per_epoch = (train.len() / cfg.batch_size.min(train.len())).max(1);
    let mut batcher = Batcher::new(train.len(), cfg.batch_size, cfg.seed);
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xada9);
    let mut adam = Adam::new(cfg.lr);
    let mut history: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.lr_at(epoch);
        let mut mean = LossComponents::default();
        for step in 0..steps_per_epoch {
            let idx = batcher.next_indices();
            let (grads, comp) = {
                let mut s = codec.session(true);
                let (loss, comp) = total_loss(&mut s, codec, train, &idx, &tasks, cfg, &mut noise)?;
                if !comp.is_finite() {
                    let last = history
                        .last()
                        .map_or("none".to_string(), |r| serde_json::to_string(r).unwrap_or_default());
                    return Err(Error::Training {
                        step: epoch * steps_per_epoch + step,
                        detail: format!("non-finite loss {comp:?}; last finite epoch: {last}"),
                    });
                }
                (s.param_grads(loss), comp)
            };
            adam.step(&mut codec.params, &grads);
            mean.accumulate(&comp, 1.0 / steps_per_epoch as f64);
        }
        let metrics = match val {
            Some(v) => evaluate_adapted(codec, v)?.metrics,
            None => BTreeMap::new(),
        };
        log::info!(
            "epoch {epoch}: lr {:.2e} loss {:.4} bpp {:.4} mse {:.5} tasks {:?} metrics {:?}",
            adam.lr,
            mean.total,
            mean.bpp,
            mean.mse,
            mean.task,
            metrics
        );
        history.push(EpochRecord {
            epoch,
            lr: adam.lr,
            loss: mean,
            metrics,
        });
    }
    Ok(history)
}

/// Writes the history as CSV: epoch, lr, loss_total, loss_rd, bpp, then
/// `loss_<task>` and `metric_<task>` per task.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut tasks: Vec<String> = history
        .iter()
        .flat_map(|r| r.loss.task.keys().chain(r.metrics.keys()).cloned())
        .collect();
    tasks.sort();
    tasks.dedup();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let mut header = vec!["epoch", "lr", "loss_total", "loss_rd", "bpp", "mse"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    for t in &tasks {
        header.push(format!("loss_{t}"));
        header.push(format!("metric_{t}"));
    }
    w.write_record(&header).map_err(|e| Error::io(path, e.into()))?;
    let opt = |v: Option<&f64>| v.map_or(String::new(), |v| v.to_string());
    for r in history {
        let mut row = vec![
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss.total.to_string(),
            r.loss.rd.to_string(),
            r.loss.bpp.to_string(),
            r.loss.mse.to_string(),
        ];
        for t in &tasks {
            row.push(opt(r.loss.task.get(t)));
            row.push(opt(r.metrics.get(t)));
        }
        w.write_record(&row).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One trained point of a `λ_rd` sweep.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub lambda_rd: f64,
    pub eval: EvalPoint,
    pub history: Vec<EpochRecord>,
    pub codec: AdaptedCodec,
}

/// Sorted, deduplicated sweep values; warns on duplicates.
pub fn dedup_lambdas(lambdas: &[f64]) -> Result<Vec<f64>> {
    if lambdas.is_empty() {
        return Err(Error::config("sweep.lambdas", "must not be empty"));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::config("sweep.lambdas", format!("{bad} is not > 0")));
    }
    let mut out = lambdas.to_vec();
    out.sort_by(f64::total_cmp);
    out.dedup();
    if out.len() != lambdas.len() {
        log::warn!("duplicate λ_rd values removed; sweeping {out:?}");
    }
    Ok(out)
}

/// Runs one fresh adaptation per `λ_rd`, each from `factory()`, and
/// evaluates it on `val`.
pub fn sweep_lambda(
    factory: impl Fn() -> Result<AdaptedCodec>,
    train: &Dataset,
    val: &Dataset,
    lambdas: &[f64],
    cfg: &TrainConfig,
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::new();
    for lambda_rd in dedup_lambdas(lambdas)? {
        let mut codec = factory()?;
        let run = TrainConfig {
            lambda_rd,
            ..cfg.clone()
        };
        let history = train_adaptation(&mut codec, train, None, &run)?;
        let eval = evaluate_adapted(&codec, val)?;
        log::info!("λ_rd {lambda_rd}: bpp {:.4} metrics {:?}", eval.bpp, eval.metrics);
        out.push(SweepPoint {
            lambda_rd,
            eval,
            history,
            codec,
        });
    }
    Ok(out)
}
