//! Small frozen convolutional predictors standing in for downstream models.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::metrics::{task_loss, MetricAccumulator};
use crate::autograd::{Session, Var};
use crate::codec::Batcher;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::{variance_scaling, Checkpoint, ParameterSet};
use crate::task::{LossKind, TaskSpec};
use crate::tensor::Tensor;

pub const PREDICTOR_PREFIX: &str = "pred";
const EVAL_BATCH: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorOptions {
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Minimum clean validation mIoU for segmentation.
    pub seg_floor: f64,
}

impl Default for PredictorOptions {
    fn default() -> Self {
        Self {
            hidden: 16,
            steps: 1500,
            batch_size: 8,
            lr: 3e-3,
            seed: 0,
            seg_floor: 0.7,
        }
    }
}

/// Frozen predictors for a task roster plus their clean-image scores.
#[derive(Clone, Debug)]
pub struct PredictorBank {
    pub specs: Vec<TaskSpec>,
    pub hidden: usize,
    pub params: ParameterSet,
    pub clean_scores: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct BankMeta {
    specs: Vec<TaskSpec>,
    hidden: usize,
    clean_scores: BTreeMap<String, f64>,
}

impl PredictorBank {
    pub fn new(specs: &[TaskSpec], hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("predictor.hidden", "must be > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for spec in specs {
            spec.validate()?;
            let p = |k: &str| format!("{PREDICTOR_PREFIX}.{}.{k}", spec.name);
            params.insert(p("c1.w"), variance_scaling(&mut rng, &[3, 3, 3, hidden], 27));
            params.insert(p("c1.b"), Tensor::zeros(&[hidden]));
            params.insert(p("c2.w"), variance_scaling(&mut rng, &[3, 3, hidden, hidden], 9 * hidden));
            params.insert(p("c2.b"), Tensor::zeros(&[hidden]));
            params.insert(p("out.w"), variance_scaling(&mut rng, &[1, 1, hidden, spec.out_channels], hidden));
            let bias = if spec.loss_kind == LossKind::L1Depth { 5.0 } else { 0.0 };
            params.insert(p("out.b"), Tensor::full(&[spec.out_channels], bias));
        }
        Ok(Self {
            specs: specs.to_vec(),
            hidden,
            params,
            clean_scores: BTreeMap::new(),
        })
    }

    pub fn spec(&self, name: &str) -> Result<&TaskSpec> {
        self.specs
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::UnknownTask(name.to_string()))
    }

    /// Predictor output for images `x` (`[B, H, W, 3]`), at image resolution.
    pub fn forward(&self, s: &mut Session, name: &str, x: Var) -> Var {
        let (_, h, w, _) = s.value(x).nhwc();
        let p = |k: &str| format!("{PREDICTOR_PREFIX}.{name}.{k}");
        let (w1, b1) = (s.p(&p("c1.w")), s.p(&p("c1.b")));
        let y = s.conv2d(x, w1, Some(b1), 2, 1);
        let y = s.gelu(y);
        let (w2, b2) = (s.p(&p("c2.w")), s.p(&p("c2.b")));
        let y = s.conv2d(y, w2, Some(b2), 1, 1);
        let y = s.gelu(y);
        let (wo, bo) = (s.p(&p("out.w")), s.p(&p("out.b")));
        let y = s.conv2d(y, wo, Some(bo), 1, 0);
        s.resize_bilinear(y, h, w)
    }

    /// Predictions for every image, computed in evaluation batches.
    pub fn predict(&self, name: &str, images: &Tensor) -> Result<Tensor> {
        self.spec(name)?;
        let n = images.shape()[0];
        let mut parts = Vec::new();
        for start in (0..n).step_by(EVAL_BATCH) {
            let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
            let mut s = Session::new(&[&self.params], false);
            let x = s.constant(crate::codec::gather_batch(images, &idx));
            let y = self.forward(&mut s, name, x);
            parts.push(s.value(y).clone());
        }
        Ok(Tensor::concat_batch(&parts))
    }

    /// Task metric of the predictor on `images` against the labels of `data`
    /// at the same indices.
    pub fn metric(&self, name: &str, images: &Tensor, data: &Dataset) -> Result<f64> {
        let spec = self.spec(name)?;
        if images.shape() != data.images.shape() {
            return Err(Error::Shape(format!(
                "images {:?} do not match dataset {:?}",
                images.shape(),
                data.images.shape()
            )));
        }
        let pred = self.predict(name, images)?;
        let mut acc = MetricAccumulator::new(spec);
        acc.update(&pred, &data.labels(spec.label, &data.all_indices()))?;
        Ok(acc.value())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = BankMeta {
            specs: self.specs.clone(),
            hidden: self.hidden,
            clean_scores: self.clean_scores.clone(),
        };
        Checkpoint {
            kind: "predictors".into(),
            meta: serde_json::to_value(meta).expect("meta serializes"),
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.kind != "predictors" {
            return Err(Error::Checkpoint(format!("expected a predictors checkpoint, got `{}`", ck.kind)));
        }
        let meta: BankMeta =
            serde_json::from_value(ck.meta).map_err(|e| Error::Checkpoint(format!("bad predictor metadata: {e}")))?;
        let expected = Self::new(&meta.specs, meta.hidden, 0)?;
        for (name, t) in expected.params.iter() {
            match ck.params.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen `{name}`"))),
            }
        }
        let mut params = ck.params;
        params.freeze_all();
        Ok(Self {
            specs: meta.specs,
            hidden: meta.hidden,
            params,
            clean_scores: meta.clean_scores,
        })
    }
}

/// Trains one predictor per spec on clean images, scores each on `val`, and
/// freezes the bank.
pub fn pretrain_predictors(
    train: &Dataset,
    val: &Dataset,
    specs: &[TaskSpec],
    opts: &PredictorOptions,
) -> Result<PredictorBank> {
    if opts.batch_size == 0 || !(opts.lr > 0.0) {
        return Err(Error::config("predictor", "batch_size and lr must be > 0"));
    }
    let mut bank = PredictorBank::new(specs, opts.hidden, opts.seed)?;
    let mut batcher = Batcher::new(train.len(), opts.batch_size, opts.seed ^ 0x9e37);
    let mut adam = Adam::new(opts.lr);
    for step in 0..opts.steps {
        // Cosine decay to a tenth of the initial rate.
        let t = step as f64 / opts.steps.max(1) as f64;
        adam.lr = opts.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()));
        let idx = batcher.next_indices();
        let grads = {
            let mut s = Session::new(&[&bank.params], true);
            let x = s.constant(train.images_at(&idx));
            let mut total: Option<Var> = None;
            for spec in specs {
                let y = bank.forward(&mut s, &spec.name, x);
                let l = task_loss(&mut s, y, &train.labels(spec.label, &idx), spec)?;
                total = Some(match total {
                    Some(t) => s.add(t, l),
                    None => l,
                });
            }
            let Some(loss) = total else { break };
            let v = s.value(loss).item();
            if !v.is_finite() {
                return Err(Error::Training {
                    step,
                    detail: format!("predictor loss {v}"),
                });
            }
            if step % 100 == 0 {
                log::debug!("predictor step {step}: loss {v:.4}");
            }
            s.param_grads(loss)
        };
        adam.step(&mut bank.params, &grads);
    }
    bank.params.freeze_all();
    for spec in specs {
        let score = bank.metric(&spec.name, &val.images, val)?;
        log::info!("predictor `{}` clean {:?}: {score:.4}", spec.name, spec.metric_kind);
        bank.clean_scores.insert(spec.name.clone(), score);
    }
    if let Some(&seg) = bank.clean_scores.get("segmentation") {
        if seg <= opts.seg_floor {
            return Err(Error::Training {
                step: opts.steps,
                detail: format!(
                    "segmentation predictor reached clean mIoU {seg:.3} <= floor {}; raise predictor steps or hidden width",
                    opts.seg_floor
                ),
            });
        }
    }
    Ok(bank)
}
