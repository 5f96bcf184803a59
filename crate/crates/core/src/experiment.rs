//! End-to-end desk experiment: data, base codec, predictors, adaptation runs
//! and their analysis, with trained artifacts cached on disk.
//!
//! Every cached artifact is keyed by a hash of everything that determines it
//! (configs, upstream parameter digests, a format version), so a stale cache
//! entry is never reused; it is simply not found.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{build_base_codec, pretrain_base, BaseCodec, PretrainRecord};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluation::{beats_at_matched_bpp, delta_m, evaluate_adapted, evaluate_base, EvalPoint, MetricDirection, RdCurve};
use crate::multitask::{AdaptedCodec, TrainableReport};
use crate::params::{hex, Checkpoint};
use crate::synth::{build_split, pretrain_predictors, Dataset, PredictorBank, Split};
use crate::task::TaskSpec;
use crate::training::{train_adaptation, EpochRecord, TrainConfig, TrainMode};

/// Bumped whenever a change alters what a cached artifact would contain.
pub const PIPELINE_VERSION: u32 = 1;

/// Environment variable overriding the cache directory.
pub const CACHE_ENV: &str = "MTAC_CACHE_DIR";

/// Cache directory from [`CACHE_ENV`], else `fallback`.
pub fn cache_dir_or(fallback: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os(CACHE_ENV).map_or_else(|| fallback.into(), PathBuf::from)
}

fn cache_key(kind: &str, parts: &impl Serialize) -> String {
    let body = serde_json::to_vec(&(PIPELINE_VERSION, kind, parts)).expect("key parts serialize");
    hex(&Sha256::digest(&body))[..20].to_string()
}

/// Summary of one adaptation run, stored next to its checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub tasks: Vec<String>,
    pub train: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// Validation evaluation after training.
    pub eval: EvalPoint,
    pub report: TrainableReport,
    pub base_digest_before: String,
    pub base_digest_after: String,
    pub predictors_digest_before: String,
    pub predictors_digest_after: String,
    pub train_seconds: f64,
}

impl RunRecord {
    pub fn lambda_rd(&self) -> f64 {
        self.train.lambda_rd
    }

    /// Whether base and predictors came out of training bit-identical.
    pub fn frozen_unchanged(&self) -> bool {
        self.base_digest_before == self.base_digest_after && self.predictors_digest_before == self.predictors_digest_after
    }
}

#[derive(Clone, Debug)]
pub struct AdaptRun {
    pub codec: AdaptedCodec,
    pub record: RunRecord,
    /// Loaded from the cache rather than trained in this process.
    pub cached: bool,
}

#[derive(Serialize, Deserialize)]
struct BaseRecord {
    history: Vec<PretrainRecord>,
}

/// Shared state of an experiment: its config, datasets and cache.
pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub train: Dataset,
    pub val: Dataset,
    cache: Option<PathBuf>,
}

impl Pipeline {
    /// Builds (or loads) both dataset splits. With `cache` set, scenes and
    /// trained artifacts are stored there.
    pub fn new(cfg: ExperimentConfig, cache: Option<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        if let Some(dir) = &cache {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let scenes = cache.as_ref().map(|d| d.join("scenes"));
        let train = build_split(&cfg.data, Split::Train, scenes.as_deref())?;
        let val = build_split(&cfg.data, Split::Val, scenes.as_deref())?;
        Ok(Self { cfg, train, val, cache })
    }

    pub fn cache_dir(&self) -> Option<&Path> {
        self.cache.as_deref()
    }

    pub fn specs(&self) -> Result<Vec<TaskSpec>> {
        self.cfg.task_specs()
    }

    fn cached_path(&self, kind: &str, key: &str, ext: &str) -> Option<PathBuf> {
        self.cache.as_ref().map(|d| d.join(format!("{kind}-{key}.{ext}")))
    }

    fn base_key(&self) -> String {
        cache_key("base", &(&self.cfg.data, &self.cfg.codec, &self.cfg.pretrain))
    }

    /// The pretrained base codec and its pretraining history.
    pub fn base(&self) -> Result<(BaseCodec, Vec<PretrainRecord>)> {
        let key = self.base_key();
        let ck_path = self.cached_path("base", &key, "mtck");
        let rec_path = self.cached_path("base", &key, "json");
        if let (Some(ck), Some(rec)) = (&ck_path, &rec_path) {
            if let (Ok(ck), Ok(rec)) = (Checkpoint::load_kind(ck, "base"), read_json::<BaseRecord>(rec)) {
                log::info!("base codec loaded from cache ({key})");
                return Ok((BaseCodec::from_checkpoint(ck)?, rec.history));
            }
        }
        log::info!("pretraining base codec: {} steps at λ {}", self.cfg.pretrain.steps, self.cfg.pretrain.lambda);
        let mut codec = build_base_codec(&self.cfg.codec, self.cfg.pretrain.seed)?;
        let history = pretrain_base(&mut codec, &self.train.images, &self.cfg.pretrain)?;
        if let (Some(ck), Some(rec)) = (&ck_path, &rec_path) {
            codec.to_checkpoint().save(ck)?;
            write_json(rec, &BaseRecord { history: history.clone() })?;
        }
        Ok((codec, history))
    }

    /// Frozen downstream predictors for the whole roster.
    pub fn predictors(&self) -> Result<PredictorBank> {
        let specs = self.specs()?;
        let key = cache_key("predictors", &(&self.cfg.data, &self.cfg.predictors, &specs));
        let path = self.cached_path("predictors", &key, "mtck");
        if let Some(p) = &path {
            if let Ok(ck) = Checkpoint::load_kind(p, "predictors") {
                log::info!("predictors loaded from cache ({key})");
                return PredictorBank::from_checkpoint(ck);
            }
        }
        log::info!("pretraining predictors for {:?}", self.cfg.tasks);
        let bank = pretrain_predictors(&self.train, &self.val, &specs, &self.cfg.predictors)?;
        if let Some(p) = &path {
            bank.to_checkpoint().save(p)?;
        }
        Ok(bank)
    }

    /// One fresh adaptation of `roster` at `lambda_rd`; a one-task roster
    /// trains in single-task mode.
    pub fn adapt(&self, base: &BaseCodec, predictors: &PredictorBank, roster: &[TaskSpec], lambda_rd: f64) -> Result<AdaptRun> {
        let mode = match roster {
            [only] => TrainMode::Singletask(only.name.clone()),
            _ => TrainMode::Multitask,
        };
        let train = TrainConfig {
            lambda_rd,
            mode,
            ..self.cfg.train.clone()
        };
        self.adapt_with(base, predictors, roster, &train)
    }

    /// Adaptation under an explicit training config.
    pub fn adapt_with(&self, base: &BaseCodec, predictors: &PredictorBank, roster: &[TaskSpec], train: &TrainConfig) -> Result<AdaptRun> {
        let base_digest = base.params.digest();
        let pred_digest = predictors.params.digest();
        let key = cache_key(
            "adapt",
            &(&base_digest, &pred_digest, roster, &self.cfg.adapt, train, &self.cfg.data),
        );
        let names: Vec<String> = roster.iter().map(|t| t.name.clone()).collect();
        let ck_path = self.cached_path("adapt", &key, "mtck");
        let rec_path = self.cached_path("adapt", &key, "json");
        if let (Some(ck), Some(rec)) = (&ck_path, &rec_path) {
            if let (Ok(ck), Ok(record)) = (Checkpoint::load_kind(ck, "adapted"), read_json::<RunRecord>(rec)) {
                let codec = AdaptedCodec::from_checkpoint(ck, base.clone(), predictors.clone())?;
                log::info!("adaptation {names:?} at λ_rd {} loaded from cache ({key})", train.lambda_rd);
                return Ok(AdaptRun {
                    codec,
                    record,
                    cached: true,
                });
            }
        }
        log::info!("adapting {names:?} at λ_rd {}", train.lambda_rd);
        let started = Instant::now();
        let mut codec = AdaptedCodec::new(base.clone(), predictors.clone(), roster, self.cfg.adapt.clone())?;
        let history = train_adaptation(&mut codec, &self.train, None, train)?;
        let train_seconds = started.elapsed().as_secs_f64();
        let eval = evaluate_adapted(&codec, &self.val)?;
        let record = RunRecord {
            tasks: names,
            train: train.clone(),
            history,
            eval,
            report: codec.trainable_report(),
            base_digest_before: base_digest,
            base_digest_after: codec.base.params.digest(),
            predictors_digest_before: pred_digest,
            predictors_digest_after: codec.predictors.params.digest(),
            train_seconds,
        };
        log::info!(
            "λ_rd {}: bpp {:.4} psnr {:.2} metrics {:?} ({train_seconds:.0} s)",
            train.lambda_rd,
            record.eval.bpp,
            record.eval.psnr,
            record.eval.metrics
        );
        if let (Some(ck), Some(rec)) = (&ck_path, &rec_path) {
            codec.to_checkpoint().save(ck)?;
            write_json(rec, &record)?;
        }
        Ok(AdaptRun {
            codec,
            record,
            cached: false,
        })
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("record serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Everything the desk-scale comparison needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeskResults {
    pub clean: BTreeMap<String, f64>,
    /// The untuned base codec, each predictor reading its reconstruction.
    pub base: EvalPoint,
    /// Multi-task sweep, ascending `λ_rd`.
    pub multitask: Vec<RunRecord>,
    /// Single-task baselines, by task then ascending `λ_rd`.
    pub single: BTreeMap<String, Vec<RunRecord>>,
    /// Anchor-task runs with 0, 1, 2, ... auxiliary tasks at `λ_rd` 1.
    pub scaling: Vec<RunRecord>,
}

/// What the scaling study trains: the anchor alone, then the anchor plus
/// the first `k` other roster tasks.
pub fn scaling_rosters(specs: &[TaskSpec], anchor: &str) -> Result<Vec<Vec<TaskSpec>>> {
    let anchor_spec = specs
        .iter()
        .find(|t| t.name == anchor)
        .ok_or_else(|| Error::UnknownTask(anchor.to_string()))?;
    let others: Vec<&TaskSpec> = specs.iter().filter(|t| t.name != anchor).collect();
    Ok((0..=others.len())
        .map(|k| std::iter::once(anchor_spec).chain(others[..k].iter().copied()).cloned().collect())
        .collect())
}

/// Trains (or loads) every run of the desk comparison.
pub fn run_desk(p: &Pipeline) -> Result<DeskResults> {
    let specs = p.specs()?;
    let (base, _) = p.base()?;
    let preds = p.predictors()?;
    let clean = crate::evaluation::evaluate_clean(&preds, &specs, &p.val)?;
    let base_eval = evaluate_base(&base, &preds, &specs, &p.val)?;
    log::info!("untuned base: bpp {:.4} psnr {:.2} metrics {:?}", base_eval.bpp, base_eval.psnr, base_eval.metrics);

    let lambdas = crate::training::dedup_lambdas(&p.cfg.sweep.lambdas)?;
    let mut multitask = Vec::new();
    for &l in &lambdas {
        multitask.push(p.adapt(&base, &preds, &specs, l)?.record);
    }
    let mut single = BTreeMap::new();
    for spec in &specs {
        let mut runs = Vec::new();
        for &l in &p.cfg.sweep.single_task_lambdas {
            runs.push(p.adapt(&base, &preds, std::slice::from_ref(spec), l)?.record);
        }
        single.insert(spec.name.clone(), runs);
    }
    let anchor = crate::task::canonical_name(&p.cfg.sweep.anchor_task)?;
    let mut scaling = Vec::new();
    for roster in scaling_rosters(&specs, &anchor)? {
        scaling.push(p.adapt(&base, &preds, &roster, 1.0)?.record);
    }
    Ok(DeskResults {
        clean,
        base: base_eval,
        multitask,
        single,
        scaling,
    })
}

/// Verdicts drawn from [`DeskResults`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DeskAnalysis {
    /// `λ_rd` at which multi- and single-task runs are compared.
    pub matched_lambda: f64,
    pub delta_m: f64,
    /// Per task: does the multi-task curve beat the untuned base at the
    /// base's bpp?
    pub beats_base: BTreeMap<String, bool>,
    /// Mean bpp of the multi-task sweep, ascending `λ_rd`.
    pub sweep_bpp: Vec<(f64, f64)>,
    /// Anchor metric as auxiliary tasks are added.
    pub scaling_metric: Vec<f64>,
    /// Increments in which the anchor metric did not get worse.
    pub scaling_non_decreasing: usize,
}

pub fn analyze(results: &DeskResults, specs: &[TaskSpec], anchor: &str) -> Result<DeskAnalysis> {
    let matched = 1.0;
    let multi_at = results
        .multitask
        .iter()
        .find(|r| r.lambda_rd() == matched)
        .ok_or_else(|| Error::EvalInput(format!("no multi-task run at λ_rd {matched}")))?;
    let mut single_at = BTreeMap::new();
    for spec in specs {
        let run = results
            .single
            .get(&spec.name)
            .and_then(|runs| runs.iter().find(|r| r.lambda_rd() == matched))
            .ok_or_else(|| Error::EvalInput(format!("no single-task `{}` run at λ_rd {matched}", spec.name)))?;
        single_at.insert(spec.name.clone(), run.eval.metrics[&spec.name]);
    }
    let directions: BTreeMap<String, MetricDirection> =
        specs.iter().map(|s| (s.name.clone(), MetricDirection::of(s))).collect();
    let dm = delta_m(&multi_at.eval.metrics, &single_at, &directions)?;

    let mut beats_base = BTreeMap::new();
    for spec in specs {
        let curve = RdCurve::new(
            "multitask",
            spec.name.clone(),
            results.multitask.iter().map(|r| (r.eval.bpp, r.eval.metrics[&spec.name])).collect(),
            MetricDirection::of(spec),
        );
        let base_point = (results.base.bpp, results.base.metrics[&spec.name]);
        beats_base.insert(spec.name.clone(), beats_at_matched_bpp(&curve, base_point)?);
    }

    let scaling_metric: Vec<f64> = results.scaling.iter().map(|r| r.eval.metrics[anchor]).collect();
    let dir = MetricDirection::of(specs.iter().find(|s| s.name == anchor).ok_or_else(|| Error::UnknownTask(anchor.into()))?);
    let scaling_non_decreasing = scaling_metric.windows(2).filter(|w| !dir.better(w[0], w[1])).count();
    Ok(DeskAnalysis {
        matched_lambda: matched,
        delta_m: dm,
        beats_base,
        sweep_bpp: results.multitask.iter().map(|r| (r.lambda_rd(), r.eval.bpp)).collect(),
        scaling_metric,
        scaling_non_decreasing,
    })
}

/// Whether bpp never rises with `λ_rd`, allowing at most one rise of at
/// most `slack` relative.
pub fn bpp_monotone(sweep: &[(f64, f64)], slack: f64) -> bool {
    let mut pts = sweep.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut inversions = 0;
    for w in pts.windows(2) {
        let (prev, next) = (w[0].1, w[1].1);
        if next > prev {
            if next > prev * (1.0 + slack) {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotone_rule() {
        assert!(bpp_monotone(&[(0.25, 1.0), (1.0, 0.8), (4.0, 0.5)], 0.05));
        assert!(bpp_monotone(&[(4.0, 0.5), (0.25, 1.0), (1.0, 1.03)], 0.05));
        assert!(!bpp_monotone(&[(0.25, 1.0), (1.0, 1.1), (4.0, 0.5)], 0.05));
        assert!(!bpp_monotone(&[(0.25, 1.0), (1.0, 1.02), (4.0, 1.04)], 0.05));
    }

    #[test]
    fn scaling_rosters_grow_from_anchor() {
        let specs: Vec<TaskSpec> = ["parsing", "segmentation", "normals"]
            .iter()
            .map(|n| TaskSpec::named(n, 5, 3).unwrap())
            .collect();
        let r = scaling_rosters(&specs, "segmentation").unwrap();
        let names: Vec<Vec<&str>> = r.iter().map(|ts| ts.iter().map(|t| t.name.as_str()).collect()).collect();
        assert_eq!(
            names,
            vec![
                vec!["segmentation"],
                vec!["segmentation", "parsing"],
                vec!["segmentation", "parsing", "normals"]
            ]
        );
        assert!(scaling_rosters(&specs, "depth").is_err());
    }

    #[test]
    fn cache_keys_track_inputs() {
        let a = cache_key("base", &(1, "x"));
        assert_eq!(a, cache_key("base", &(1, "x")));
        assert_ne!(a, cache_key("base", &(2, "x")));
        assert_ne!(a, cache_key("adapt", &(1, "x")));
    }
}
