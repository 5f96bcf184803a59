//! Task losses on graph outputs and streaming task metrics.

use super::dataset::Labels;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::task::{LossKind, MetricKind, TaskSpec};
use crate::tensor::Tensor;

fn check_rows(pred_shape: &[usize], channels: usize, label_rows: usize) -> Result<()> {
    let c = *pred_shape.last().unwrap_or(&0);
    let rows: usize = pred_shape.iter().product::<usize>() / c.max(1);
    if c != channels || rows != label_rows {
        return Err(Error::Shape(format!(
            "prediction {pred_shape:?} does not match {label_rows} labels of {channels} channel(s)"
        )));
    }
    Ok(())
}

/// The task loss `L_i` of a prediction against its labels.
pub fn task_loss(g: &mut Graph, pred: Var, labels: &Labels, spec: &TaskSpec) -> Result<Var> {
    let shape = g.value(pred).shape().to_vec();
    match (spec.loss_kind, labels) {
        (LossKind::CrossEntropy, Labels::Classes(l)) => {
            check_rows(&shape, spec.out_channels, l.len())?;
            if let Some(bad) = l.iter().find(|&&c| c >= spec.out_channels) {
                return Err(Error::Shape(format!("label {bad} out of range for `{}`", spec.name)));
            }
            Ok(g.softmax_cross_entropy(pred, l))
        }
        (LossKind::BinaryCe, Labels::Binary(l)) => {
            check_rows(&shape, 1, l.len())?;
            Ok(g.bce_with_logits(pred, l))
        }
        (LossKind::L1Depth, Labels::Dense(t)) if t.shape() == shape.as_slice() => {
            let t = g.constant(t.clone());
            Ok(g.l1(pred, t))
        }
        (LossKind::CosineNormals, Labels::Dense(t)) if t.shape() == shape.as_slice() => {
            check_rows(&shape, 3, t.len() / 3)?;
            let t = g.constant(t.clone());
            Ok(g.cosine_loss(pred, t))
        }
        _ => Err(Error::Shape(format!(
            "labels do not fit the {:?} loss of `{}` (prediction {shape:?})",
            spec.loss_kind, spec.name
        ))),
    }
}

/// Accumulates a metric over batches.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    kind: MetricKind,
    classes: usize,
    confusion: Vec<u64>,
    sum: f64,
    count: usize,
}

impl MetricAccumulator {
    pub fn new(spec: &TaskSpec) -> Self {
        let classes = match spec.metric_kind {
            MetricKind::MiouBinary => 2,
            MetricKind::Miou => spec.out_channels,
            _ => 0,
        };
        Self {
            kind: spec.metric_kind,
            classes,
            confusion: vec![0; classes * classes],
            sum: 0.0,
            count: 0,
        }
    }

    pub fn update(&mut self, pred: &Tensor, labels: &Labels) -> Result<()> {
        let mismatch = || Error::Shape(format!("labels do not fit {:?} prediction {:?}", self.kind, pred.shape()));
        match (self.kind, labels) {
            (MetricKind::Miou, Labels::Classes(l)) => {
                check_rows(pred.shape(), self.classes, l.len())?;
                for (row, &lab) in pred.data().chunks(self.classes).zip(l) {
                    if lab >= self.classes {
                        return Err(mismatch());
                    }
                    let arg = argmax(row);
                    self.confusion[lab * self.classes + arg] += 1;
                }
            }
            (MetricKind::MiouBinary, Labels::Binary(l)) => {
                check_rows(pred.shape(), 1, l.len())?;
                for (&z, &t) in pred.data().iter().zip(l) {
                    let (lab, p) = (usize::from(t > 0.5), usize::from(z > 0.0));
                    self.confusion[lab * 2 + p] += 1;
                }
            }
            (MetricKind::Rmse, Labels::Dense(t)) if t.shape() == pred.shape() => {
                self.sum += pred.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                self.count += t.len();
            }
            (MetricKind::AngularError, Labels::Dense(t)) if t.shape() == pred.shape() => {
                check_rows(pred.shape(), 3, t.len() / 3)?;
                for (p, q) in pred.data().chunks(3).zip(t.data().chunks(3)) {
                    self.sum += angle_degrees(p, q);
                    self.count += 1;
                }
            }
            _ => return Err(mismatch()),
        }
        Ok(())
    }

    pub fn value(&self) -> f64 {
        match self.kind {
            MetricKind::Miou | MetricKind::MiouBinary => {
                let k = self.classes;
                let ious: Vec<f64> = (0..k)
                    .filter_map(|c| {
                        let in_label: u64 = self.confusion[c * k..(c + 1) * k].iter().sum();
                        if in_label == 0 {
                            return None;
                        }
                        let tp = self.confusion[c * k + c];
                        let predicted: u64 = (0..k).map(|r| self.confusion[r * k + c]).sum();
                        Some(tp as f64 / (in_label + predicted - tp) as f64)
                    })
                    .collect();
                if ious.is_empty() {
                    0.0
                } else {
                    ious.iter().sum::<f64>() / ious.len() as f64
                }
            }
            MetricKind::Rmse => (self.sum / self.count.max(1) as f64).sqrt(),
            MetricKind::AngularError => self.sum / self.count.max(1) as f64,
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn angle_degrees(p: &[f64], q: &[f64]) -> f64 {
    let np = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    let nq = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt();
    if np == 0.0 || nq == 0.0 {
        return 90.0;
    }
    ((p[0] * q[0] + p[1] * q[1] + p[2] * q[2]) / (np * nq)).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Metric of one prediction batch.
pub fn task_metric(pred: &Tensor, labels: &Labels, spec: &TaskSpec) -> Result<f64> {
    let mut acc = MetricAccumulator::new(spec);
    acc.update(pred, labels)?;
    Ok(acc.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg() -> TaskSpec {
        TaskSpec::named("segmentation", 2, 3).unwrap()
    }

    #[test]
    fn perfect_segmentation() {
        let labels = vec![0, 1, 1, 0];
        let pred = Tensor::from_vec(&[1, 2, 2, 2], vec![5.0, 0.0, 0.0, 5.0, 0.0, 5.0, 5.0, 0.0]);
        assert_eq!(task_metric(&pred, &Labels::Classes(labels), &seg()).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_confusion() {
        // All predicted class 0; half the labels are 1. IoU(0)=0.5, IoU(1)=0.
        let labels = vec![0, 0, 1, 1];
        let pred = Tensor::from_vec(&[1, 2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let m = task_metric(&pred, &Labels::Classes(labels), &seg()).unwrap();
        assert!((m - 0.25).abs() < 1e-12);
    }

    #[test]
    fn absent_classes_do_not_count() {
        let spec = TaskSpec::named("segmentation", 4, 3).unwrap();
        let pred = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(task_metric(&pred, &Labels::Classes(vec![0, 0]), &spec).unwrap(), 1.0);
    }

    #[test]
    fn normals_identity() {
        let spec = TaskSpec::named("normals", 2, 3).unwrap();
        let n = Tensor::from_vec(&[1, 1, 2, 3], vec![0.0, 0.6, 0.8, 1.0, 0.0, 0.0]);
        let labels = Labels::Dense(n.clone());
        assert!(task_metric(&n, &labels, &spec).unwrap().abs() < 1e-6);
        let mut g = Graph::new();
        let p = g.constant(n);
        let l = task_loss(&mut g, p, &labels, &spec).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let flipped = Tensor::from_vec(&[1, 1, 2, 3], vec![0.0, -0.6, -0.8, -1.0, 0.0, 0.0]);
        assert!((task_metric(&flipped, &labels, &spec).unwrap() - 180.0).abs() < 1e-6);
    }

    #[test]
    fn depth_rmse_and_binary_miou() {
        let spec = TaskSpec::named("depth", 2, 3).unwrap();
        let p = Tensor::from_vec(&[1, 1, 2, 1], vec![1.0, 2.0]);
        let t = Tensor::from_vec(&[1, 1, 2, 1], vec![4.0, 2.0]);
        assert!((task_metric(&p, &Labels::Dense(t), &spec).unwrap() - (4.5f64).sqrt()).abs() < 1e-12);
        let spec = TaskSpec::named("saliency", 2, 3).unwrap();
        let z = Tensor::from_vec(&[1, 1, 4, 1], vec![3.0, -1.0, 2.0, -2.0]);
        let m = task_metric(&z, &Labels::Binary(vec![1.0, 0.0, 0.0, 0.0]), &spec).unwrap();
        // IoU(fg) = 1/2, IoU(bg) = 2/3.
        assert!((m - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let p = Tensor::zeros(&[1, 2, 2, 2]);
        assert!(matches!(
            task_metric(&p, &Labels::Classes(vec![0; 3]), &seg()),
            Err(Error::Shape(_))
        ));
        let mut g = Graph::new();
        let v = g.constant(p);
        assert!(matches!(
            task_loss(&mut g, v, &Labels::Binary(vec![0.0; 4]), &seg()),
            Err(Error::Shape(_))
        ));
    }
}
