use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    L1Depth,
    CosineNormals,
    BinaryCe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Miou,
    Rmse,
    AngularError,
    MiouBinary,
}

impl MetricKind {
    pub fn higher_is_better(self) -> bool {
        matches!(self, MetricKind::Miou | MetricKind::MiouBinary)
    }
}

/// Which label array of a scene a task is supervised by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    Segmentation,
    Parts,
    Saliency,
    Depth,
    Normals,
}

/// One downstream task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub out_channels: usize,
    pub loss_kind: LossKind,
    pub metric_kind: MetricKind,
    pub weight: f64,
    pub label: LabelSource,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("tasks.{}.{f}", self.name);
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::config(field("weight"), "must be > 0"));
        }
        if self.out_channels == 0 {
            return Err(Error::config(field("out_channels"), "must be >= 1"));
        }
        let ok = match self.loss_kind {
            LossKind::CrossEntropy => self.out_channels >= 2,
            LossKind::BinaryCe | LossKind::L1Depth => self.out_channels == 1,
            LossKind::CosineNormals => self.out_channels == 3,
        };
        if !ok {
            return Err(Error::config(
                field("out_channels"),
                format!("{} channels do not fit loss {:?}", self.out_channels, self.loss_kind),
            ));
        }
        Ok(())
    }

    /// Built-in task by name. Accepts a few long-form aliases.
    pub fn named(name: &str, num_classes: usize, num_parts: usize) -> Result<Self> {
        let (canonical, out, loss, metric, label) = match name {
            "segmentation" | "seg" | "semseg" => (
                "segmentation",
                num_classes,
                LossKind::CrossEntropy,
                MetricKind::Miou,
                LabelSource::Segmentation,
            ),
            "parsing" | "parts" | "human_parsing" => (
                "parsing",
                num_parts,
                LossKind::CrossEntropy,
                MetricKind::Miou,
                LabelSource::Parts,
            ),
            "saliency" | "sal" => ("saliency", 1, LossKind::BinaryCe, MetricKind::MiouBinary, LabelSource::Saliency),
            "normals" | "surface_normals" => (
                "normals",
                3,
                LossKind::CosineNormals,
                MetricKind::AngularError,
                LabelSource::Normals,
            ),
            "depth" => ("depth", 1, LossKind::L1Depth, MetricKind::Rmse, LabelSource::Depth),
            other => return Err(Error::UnknownTask(other.to_string())),
        };
        Ok(Self {
            name: canonical.to_string(),
            out_channels: out,
            loss_kind: loss,
            metric_kind: metric,
            weight: 1.0,
            label,
        })
    }
}

/// Canonical name for a task name or alias.
pub fn canonical_name(name: &str) -> Result<String> {
    TaskSpec::named(name, 2, 2).map(|t| t.name)
}
