//! Experiment configuration: one TOML file covering data, codec, pretraining,
//! predictors, adaptation, training and the λ sweep.
//!
//! A file only needs the keys it changes. It is merged over
//! [`ExperimentConfig::default`] (the desk-scale setup) and then checked
//! against the schema, so misspelled keys are rejected rather than ignored.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::codec::{PretrainOptions, StageConfig};
use crate::error::{Error, Result};
use crate::multitask::AdaptConfig;
use crate::synth::{DatasetConfig, PredictorOptions, NUM_PARTS};
use crate::task::{canonical_name, TaskSpec};
use crate::training::{TrainConfig, TrainMode};

/// Base-codec distortion weight used at desk scale. Also the inner `λ` of
/// the adaptation objective, which must match the base it adapts.
pub const DESK_LAMBDA: f64 = 100.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// `λ_rd` values of the multi-task sweep.
    pub lambdas: Vec<f64>,
    /// `λ_rd` values at which single-task baselines are trained.
    pub single_task_lambdas: Vec<f64>,
    /// Task whose metric is tracked as auxiliary tasks are added.
    pub anchor_task: String,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.25, 1.0, 4.0],
            single_task_lambdas: vec![1.0],
            anchor_task: "segmentation".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Parent of the per-command run directories.
    pub output_dir: PathBuf,
    /// Task roster of the multi-task codec, in path order.
    pub tasks: Vec<String>,
    pub data: DatasetConfig,
    pub codec: StageConfig,
    pub pretrain: PretrainOptions,
    pub predictors: PredictorOptions,
    pub adapt: AdaptConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            tasks: ["segmentation", "parsing", "saliency", "normals"].map(String::from).to_vec(),
            data: DatasetConfig::default(),
            codec: StageConfig::default(),
            pretrain: PretrainOptions {
                lambda: DESK_LAMBDA,
                steps: 2500,
                batch_size: 8,
                lr: 1e-3,
                decay_steps: vec![1500, 2200],
                decay_factor: 0.1,
                seed: 0,
                quantize: true,
            },
            predictors: PredictorOptions::default(),
            adapt: AdaptConfig {
                msf_window: 8,
                ..AdaptConfig::default()
            },
            train: TrainConfig {
                lambda: DESK_LAMBDA,
                lr: 2e-3,
                ..TrainConfig::default()
            },
            sweep: SweepConfig::default(),
        }
    }
}

/// Recursively overlays `over` onto `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses TOML text merged over the defaults, then validates.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Value = text
            .parse::<toml::Table>()
            .map(toml::Value::Table)
            .map_err(|e| Error::config("config", e.message().to_string()))?;
        let mut merged = toml::Value::try_from(Self::default()).expect("defaults serialize");
        merge(&mut merged, user);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. A missing or unreadable file is a
    /// configuration error naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config file: {e}")))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config { field, reason } => Error::config(format!("{}: {field}", path.display()), reason),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Writes the fully resolved config as `config.toml` into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml_string()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.codec.validate()?;
        self.codec.check_image(self.data.image_size, self.data.image_size)?;
        self.adapt.validate()?;
        self.train.validate()?;
        if self.tasks.is_empty() {
            return Err(Error::config("tasks", "at least one task is required"));
        }
        let specs = self.task_specs()?;
        for (i, t) in specs.iter().enumerate() {
            if specs[..i].iter().any(|o| o.name == t.name) {
                return Err(Error::config("tasks", format!("task `{}` listed twice", t.name)));
            }
        }
        if self.train.lambda != self.pretrain.lambda {
            return Err(Error::config(
                "train.lambda",
                format!("must equal pretrain.lambda ({}) so adaptation keeps the base trade-off", self.pretrain.lambda),
            ));
        }
        if let TrainMode::Singletask(name) = &self.train.mode {
            canonical_name(name)?;
        }
        crate::training::dedup_lambdas(&self.sweep.lambdas)?;
        if !self.sweep.single_task_lambdas.is_empty() {
            crate::training::dedup_lambdas(&self.sweep.single_task_lambdas)
                .map_err(|_| Error::config("sweep.single_task_lambdas", "values must be > 0"))?;
        }
        let anchor = canonical_name(&self.sweep.anchor_task)?;
        if !specs.iter().any(|t| t.name == anchor) {
            return Err(Error::config("sweep.anchor_task", format!("`{anchor}` is not in the task roster")));
        }
        Ok(())
    }

    /// Task specs of the roster, with weights from `train.task_weights`.
    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        self.tasks
            .iter()
            .map(|name| {
                let mut spec = TaskSpec::named(name, self.data.num_classes, NUM_PARTS)?;
                if let Some((_, &w)) = self
                    .train
                    .task_weights
                    .iter()
                    .find(|(k, _)| canonical_name(k).is_ok_and(|c| c == spec.name))
                {
                    if w > 0.0 {
                        spec.weight = w;
                    }
                }
                Ok(spec)
            })
            .collect()
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    /// `multitask` or `singletask:<task>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "multitask" => Ok(TrainMode::Multitask),
            Some(("singletask", task)) => Ok(TrainMode::Singletask(canonical_name(task)?)),
            _ => Err(Error::config("mode", format!("expected `multitask` or `singletask:<task>`, got `{s}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn shipped_desk_config_is_the_default() {
        let cfg = ExperimentConfig::from_toml_str(include_str!("../../../configs/desk.toml")).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[train]\nlambda_rd = 4.0\n[adapt]\nhead_hidden = 4\n").unwrap();
        assert_eq!(cfg.train.lambda_rd, 4.0);
        assert_eq!(cfg.train.lr, ExperimentConfig::default().train.lr);
        assert_eq!(cfg.adapt.head_hidden, 4);
        assert_eq!(cfg.adapt.msf_window, 8);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = ExperimentConfig::from_toml_str("[train]\nlamda_rd = 4.0\n").unwrap_err();
        assert!(matches!(err, Error::Config { .. }), "{err}");
        assert!(ExperimentConfig::from_toml_str("bogus = 1\n").is_err());
    }

    #[test]
    fn zero_lambda_rd_rejected() {
        let err = ExperimentConfig::from_toml_str("[train]\nlambda_rd = 0.0\n").unwrap_err();
        assert!(err.to_string().contains("lambda_rd"), "{err}");
    }

    #[test]
    fn missing_file_names_path() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/desk.toml")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/desk.toml"));
    }

    #[test]
    fn mismatched_inner_lambda_rejected() {
        let err = ExperimentConfig::from_toml_str("[train]\nlambda = 3.0\n").unwrap_err();
        assert!(err.to_string().contains("train.lambda"));
    }

    #[test]
    fn modes_parse() {
        assert_eq!("multitask".parse::<TrainMode>().unwrap(), TrainMode::Multitask);
        assert_eq!(
            "singletask:seg".parse::<TrainMode>().unwrap(),
            TrainMode::Singletask("segmentation".into())
        );
        assert!("singletask:detection".parse::<TrainMode>().is_err());
        assert!("both".parse::<TrainMode>().is_err());
    }

    #[test]
    fn single_task_mode_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.mode = TrainMode::Singletask("parsing".into());
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back.train.mode, cfg.train.mode);
    }
}
