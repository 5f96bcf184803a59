//! Tables over finished runs: BD-Rate/BD-Acc against an anchor run and Δm
//! against single-task runs, rebuilt entirely from run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{bd_acc, bd_rate, delta_m, MetricDirection, RdCurve};
use crate::experiment::RunRecord;

/// File name of a run's summary inside its directory.
pub const RECORD_FILE: &str = "record.json";

/// The runs found under one directory, labelled by the directory name.
#[derive(Clone, Debug)]
pub struct RunSet {
    pub label: String,
    pub records: Vec<RunRecord>,
}

impl RunSet {
    /// Loads `record.json` from `dir` itself or from its immediate
    /// subdirectories (one per `λ_rd` of a sweep).
    pub fn load(dir: &Path) -> Result<Self> {
        let label = dir
            .file_name()
            .map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into_owned());
        let mut paths = Vec::new();
        if dir.join(RECORD_FILE).is_file() {
            paths.push(dir.join(RECORD_FILE));
        } else {
            let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
            for entry in entries {
                let p = entry.map_err(|e| Error::io(dir, e))?.path().join(RECORD_FILE);
                if p.is_file() {
                    paths.push(p);
                }
            }
        }
        if paths.is_empty() {
            return Err(Error::EvalInput(format!("no {RECORD_FILE} under {}", dir.display())));
        }
        let mut records = paths
            .iter()
            .map(|p| {
                let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                serde_json::from_slice::<RunRecord>(&bytes).map_err(|e| Error::EvalInput(format!("{}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>>>()?;
        records.sort_by(|a, b| a.lambda_rd().total_cmp(&b.lambda_rd()));
        Ok(Self { label, records })
    }

    /// Tasks with a metric in every record, in a stable order.
    pub fn tasks(&self) -> Vec<String> {
        let mut tasks: Vec<String> = self.records.first().map_or_else(Vec::new, |r| r.eval.metrics.keys().cloned().collect());
        tasks.retain(|t| self.records.iter().all(|r| r.eval.metrics.contains_key(t)));
        tasks
    }

    pub fn curve(&self, task: &str, direction: MetricDirection) -> RdCurve {
        RdCurve::new(
            self.label.clone(),
            task,
            self.records.iter().map(|r| (r.eval.bpp, r.eval.metrics[task])).collect(),
            direction,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BdCell {
    pub run: String,
    pub task: String,
    pub bd_rate: Option<f64>,
    pub bd_acc: Option<f64>,
    /// Set when a value could not be computed, e.g. `no-overlap`.
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaMRow {
    pub run: String,
    pub lambda_rd: f64,
    pub delta_m: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub anchor: String,
    pub bd: Vec<BdCell>,
    pub delta_m: Vec<DeltaMRow>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub curves: Vec<RdCurve>,
}

/// Direction of a task's metric, taken from the task name.
fn direction(task: &str) -> Result<MetricDirection> {
    let spec = crate::task::TaskSpec::named(task, 2, 2)?;
    Ok(MetricDirection::of(&spec))
}

/// Builds the report. With `with_bd`, every run needs at least 4 points per
/// task (an evaluation-input error otherwise); curves that do not overlap
/// the anchor get a `no-overlap` cell and a warning.
pub fn build_report(runs: &[RunSet], anchor: &RunSet, singles: &[RunSet], with_bd: bool) -> Result<Report> {
    let mut warnings = Vec::new();
    let mut bd = Vec::new();
    let mut curves = Vec::new();
    let anchor_tasks = anchor.tasks();
    for task in &anchor_tasks {
        curves.push(anchor.curve(task, direction(task)?));
    }
    for run in runs {
        for task in run.tasks() {
            let dir = direction(&task)?;
            let test = run.curve(&task, dir);
            if run.label != anchor.label {
                curves.push(test.clone());
            }
            if !with_bd || !anchor_tasks.contains(&task) {
                continue;
            }
            let base = anchor.curve(&task, dir);
            let mut cell = BdCell {
                run: run.label.clone(),
                task: task.clone(),
                bd_rate: None,
                bd_acc: None,
                note: None,
            };
            for (slot, value) in [(&mut cell.bd_rate, bd_rate(&base, &test)), (&mut cell.bd_acc, bd_acc(&base, &test))] {
                match value {
                    Ok(v) => *slot = Some(v),
                    Err(Error::NoOverlap(why)) => {
                        warnings.push(format!("{} / {task}: no overlap with anchor ({why})", run.label));
                        cell.note = Some("no-overlap".into());
                    }
                    Err(e) => return Err(e),
                }
            }
            bd.push(cell);
        }
    }

    let mut single_at: BTreeMap<(String, u64), f64> = BTreeMap::new();
    for set in singles {
        for r in &set.records {
            for (task, &m) in &r.eval.metrics {
                single_at.insert((task.clone(), r.lambda_rd().to_bits()), m);
            }
        }
    }
    let mut dm = Vec::new();
    if !singles.is_empty() {
        for run in runs.iter().filter(|r| r.tasks().len() > 1) {
            for r in &run.records {
                let key = r.lambda_rd().to_bits();
                let mut single = BTreeMap::new();
                let mut dirs = BTreeMap::new();
                let mut missing = Vec::new();
                for task in r.eval.metrics.keys() {
                    match single_at.get(&(task.clone(), key)) {
                        Some(&m) => {
                            single.insert(task.clone(), m);
                            dirs.insert(task.clone(), direction(task)?);
                        }
                        None => missing.push(task.clone()),
                    }
                }
                if !missing.is_empty() {
                    warnings.push(format!(
                        "{} at λ_rd {}: no single-task run for {missing:?}; Δm skipped",
                        run.label,
                        r.lambda_rd()
                    ));
                    continue;
                }
                dm.push(DeltaMRow {
                    run: run.label.clone(),
                    lambda_rd: r.lambda_rd(),
                    delta_m: delta_m(&r.eval.metrics, &single, &dirs)?,
                });
            }
        }
    }
    Ok(Report {
        anchor: anchor.label.clone(),
        bd,
        delta_m: dm,
        warnings,
        curves,
    })
}

impl Report {
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# Rate-accuracy report\n\nAnchor: `{}`\n", self.anchor);
        if !self.bd.is_empty() {
            let _ = writeln!(s, "| run | task | BD-Rate (%) | BD-Acc |\n|---|---|---|---|");
            let fmt = |v: Option<f64>, note: &Option<String>, digits: usize| match (v, note) {
                (Some(v), _) => format!("{v:.digits$}"),
                (None, Some(n)) => n.clone(),
                (None, None) => "-".into(),
            };
            for c in &self.bd {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} |",
                    c.run,
                    c.task,
                    fmt(c.bd_rate, &c.note, 2),
                    fmt(c.bd_acc, &c.note, 4)
                );
            }
            s.push('\n');
        }
        if !self.delta_m.is_empty() {
            let _ = writeln!(s, "| run | λ_rd | Δm (%) |\n|---|---|---|");
            for r in &self.delta_m {
                let _ = writeln!(s, "| {} | {} | {:+.3} |", r.run, r.lambda_rd, r.delta_m);
            }
            s.push('\n');
        }
        let _ = writeln!(s, "Warnings: {}", self.warnings.len());
        for w in &self.warnings {
            let _ = writeln!(s, "- {w}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::EvalPoint;
    use crate::multitask::TrainableReport;
    use crate::training::TrainConfig;

    fn record(lambda_rd: f64, bpp: f64, metrics: &[(&str, f64)]) -> RunRecord {
        RunRecord {
            tasks: metrics.iter().map(|(t, _)| t.to_string()).collect(),
            train: TrainConfig {
                lambda_rd,
                ..TrainConfig::default()
            },
            history: Vec::new(),
            eval: EvalPoint {
                bpp,
                mse: 0.01,
                psnr: 20.0,
                metrics: metrics.iter().map(|(t, m)| (t.to_string(), *m)).collect(),
            },
            report: TrainableReport {
                total: 1,
                trainable: 0,
                ratio: 0.0,
                base: 1,
                adaptor: 0,
            },
            base_digest_before: String::new(),
            base_digest_after: String::new(),
            predictors_digest_before: String::new(),
            predictors_digest_after: String::new(),
            train_seconds: 0.0,
        }
    }

    fn set(label: &str, records: Vec<RunRecord>) -> RunSet {
        RunSet {
            label: label.into(),
            records,
        }
    }

    fn sweep(label: &str, shift: f64) -> RunSet {
        let pts = [(0.25, 0.2), (0.5, 0.4), (1.0, 0.8), (4.0, 1.6)];
        set(
            label,
            pts.iter()
                .enumerate()
                .map(|(i, &(l, b))| record(l, b, &[("segmentation", 0.6 + 0.05 * i as f64 + shift), ("depth", 0.9 - 0.1 * i as f64)]))
                .collect(),
        )
    }

    #[test]
    fn anchor_against_itself_is_zero() {
        let a = sweep("a", 0.0);
        let r = build_report(std::slice::from_ref(&a), &a, &[], true).unwrap();
        assert_eq!(r.bd.len(), 2);
        for c in &r.bd {
            assert!(c.bd_rate.unwrap().abs() < 1e-9 && c.bd_acc.unwrap().abs() < 1e-9, "{c:?}");
        }
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn too_few_points_is_an_input_error() {
        let mut a = sweep("a", 0.0);
        a.records.pop();
        let err = build_report(std::slice::from_ref(&a), &a, &[], true).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        assert!(build_report(std::slice::from_ref(&a), &a, &[], false).is_ok());
    }

    #[test]
    fn non_overlap_is_marked_not_fatal() {
        let a = sweep("a", 0.0);
        let b = sweep("b", 10.0);
        let r = build_report(&[b], &a, &[], true).unwrap();
        let seg = r.bd.iter().find(|c| c.task == "segmentation").unwrap();
        assert_eq!(seg.note.as_deref(), Some("no-overlap"));
        assert!(!r.warnings.is_empty());
        assert!(r.to_markdown().contains("no-overlap"));
    }

    #[test]
    fn delta_m_rows_match_lambdas() {
        let multi = set("multi", vec![record(1.0, 0.5, &[("segmentation", 0.66), ("depth", 0.57)])]);
        let singles = [
            set("seg", vec![record(1.0, 0.5, &[("segmentation", 0.6)])]),
            set("depth", vec![record(1.0, 0.5, &[("depth", 0.6)])]),
        ];
        let r = build_report(std::slice::from_ref(&multi), &multi, &singles, false).unwrap();
        assert_eq!(r.delta_m.len(), 1);
        // (+10% + 5%) / 2
        assert!((r.delta_m[0].delta_m - 7.5).abs() < 1e-9);
    }

    #[test]
    fn loads_sweep_directories() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("sweep");
        for (i, l) in [4.0, 0.25].iter().enumerate() {
            let sub = root.join(format!("l{i}"));
            std::fs::create_dir_all(&sub).unwrap();
            let r = record(*l, 1.0, &[("depth", 0.5)]);
            std::fs::write(sub.join(RECORD_FILE), serde_json::to_string(&r).unwrap()).unwrap();
        }
        let s = RunSet::load(&root).unwrap();
        assert_eq!(s.label, "sweep");
        assert_eq!(s.records.iter().map(|r| r.lambda_rd()).collect::<Vec<_>>(), vec![0.25, 4.0]);
        assert!(RunSet::load(dir.path()).is_err());
    }
}
